"""Two-stage training: infilling pretraining, then contrastive fine-tuning.

Both stages share the Adam + decoupled weight decay step, dev-metric
early stopping with patience, and best-epoch checkpoint selection.  Mask
subsets are redrawn every pretraining epoch (dynamic masking); the dev
set's masks are drawn once so the dev metric is comparable across epochs.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import no_grad
from .errors import ConfigError, NonFiniteGradient
from .events import MCNCInstance
from .masking import InfillSample, make_infill_sample, make_random_span_sample
from .model import ModelParams, grad, pad_batch, save_checkpoint
from .scoring import (
    batched_candidate_scores,
    batched_classifier_scores,
    batched_target_scores,
    classifier_score_instances,
    loss_cot,
    loss_cross,
    loss_margin,
    score_instances,
    softmax_scores,
)
from .verbalizer import PAD_ID, Vocabulary

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "AdamState",
    "init_adam_state",
    "adam_step",
    "pretrain",
    "finetune",
    "accuracy",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    decay: str = "decoupled"  # or "l2"
    # fine-tuning only
    loss_kind: str = "cot"  # cot | cross | margin | classifier
    margin: float = 0.1
    margin_orientation: str = "conventional"
    scoring: str = "mean"  # mean | sum
    norm: str = "paper"  # paper | generated
    # pretraining only
    mask_style: str = "event"  # event | span

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.decay not in ("decoupled", "l2"):
            raise ConfigError(f"unknown decay mode {self.decay!r}")
        if self.loss_kind not in ("cot", "cross", "margin", "classifier"):
            raise ConfigError(f"unknown loss {self.loss_kind!r}")
        if self.margin_orientation not in ("conventional", "paper-literal"):
            raise ConfigError(f"unknown orientation {self.margin_orientation!r}")
        if self.scoring not in ("mean", "sum"):
            raise ConfigError(f"unknown scoring {self.scoring!r}")
        if self.norm not in ("paper", "generated"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.mask_style not in ("event", "span"):
            raise ConfigError(f"unknown mask style {self.mask_style!r}")


@dataclass
class TrainReport:
    stage: str
    metric_mode: str  # "min" (dev NLL) or "max" (dev accuracy)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_metric: float = float("nan")
    best_checkpoint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    def to_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(m=d["m"], v=d["v"], t=d["t"])


def init_adam_state(params: ModelParams) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.tensors.items()},
        v={k: np.zeros_like(v) for k, v in params.tensors.items()},
        t=0,
    )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update.  Weight decay is decoupled by
    default (parameters shrink by lr * wd before the update); decay="l2"
    folds it into the gradient instead."""
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2, eps = config.beta1, config.beta2, config.eps
    t = state.t + 1
    new_tensors, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {name!r} is not finite")
        if config.decay == "l2" and wd:
            g = g + wd * p
        elif config.decay == "decoupled" and wd:
            p = p * (1.0 - lr * wd)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_tensors[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        new_m[name] = m.astype(p.dtype)
        new_v[name] = v.astype(p.dtype)
    return ModelParams(params.config, new_tensors), AdamState(new_m, new_v, t)


# --- shared loop machinery ----------------------------------------------------

class _EarlyStopper:
    """Stop after `patience` consecutive epochs without dev improvement."""

    def __init__(self, patience: int, mode: str):
        self.patience = patience
        self.sign = 1.0 if mode == "max" else -1.0
        self.best: float | None = None
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, metric: float) -> bool:
        if self.best is None or self.sign * metric > self.sign * self.best:
            self.best = metric
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


def _log_epoch(out_dir: Path | None, record: dict) -> None:
    logger.info(
        "%s epoch %d: train_loss=%.4f dev=%.4f test=%s",
        record["stage"], record["epoch"], record["train_loss"],
        record["dev_metric"], record.get("test_acc"),
    )
    if out_dir is not None:
        with (out_dir / "metrics.jsonl").open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def accuracy(
    params: ModelParams,
    vocab: Vocabulary,
    instances: Sequence[MCNCInstance],
    *,
    scoring: str = "mean",
    norm: str = "paper",
    batch_size: int = 32,
) -> float:
    """Fraction of instances whose top-scored candidate is the answer."""
    if not instances:
        return 0.0
    if scoring == "classifier":
        o = classifier_score_instances(params, vocab, instances, batch_size=batch_size)
    else:
        o = score_instances(
            params, vocab, instances, scoring=scoring, norm=norm, batch_size=batch_size
        )
    chosen = np.argmax(o, axis=1)
    answers = np.array([inst.answer_index for inst in instances])
    return float(np.mean(chosen == answers))


def _run_stage(
    stage: str,
    params: ModelParams,
    config: TrainConfig,
    n_train: int,
    run_epoch: Callable[[ModelParams, AdamState, np.ndarray], tuple[ModelParams, AdamState, float]],
    dev_metric: Callable[[ModelParams], float],
    metric_mode: str,
    out_dir: str | Path | None,
    test_metric: Callable[[ModelParams], float] | None,
) -> tuple[ModelParams, TrainReport]:
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    shuffle_rng = _rng(config.seed, 0)
    stopper = _EarlyStopper(config.patience, metric_mode)
    state = init_adam_state(params)
    report = TrainReport(stage=stage, metric_mode=metric_mode)
    best_params = params.copy()
    tag = "stage1" if stage == "pretrain" else "stage2"

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n_train)
        params, state, train_loss = run_epoch(params, state, order)
        dev_value = dev_metric(params)
        test_value = test_metric(params) if test_metric is not None else None
        improved = stopper.update(epoch, dev_value)
        if improved:
            best_params = params.copy()
        record = {
            "stage": stage,
            "epoch": epoch,
            "train_loss": train_loss,
            "dev_metric": dev_value,
            "test_acc": test_value,
            "seconds": time.perf_counter() - started,
        }
        report.epochs.append(record)
        _log_epoch(out_path, record)
        if out_path is not None:
            save_checkpoint(params, state.to_dict(), out_path / f"{tag}-epoch{epoch}.ckpt")
            if improved:
                save_checkpoint(best_params, None, out_path / "best.ckpt")
                report.best_checkpoint = str(out_path / "best.ckpt")
        if stopper.should_stop:
            break

    report.best_epoch = stopper.best_epoch
    report.best_dev_metric = float(stopper.best) if stopper.best is not None else float("nan")
    return best_params, report


# --- stage 1: event-centric pretraining ------------------------------------------

def _sample_maker(mask_style: str):
    return make_infill_sample if mask_style == "event" else make_random_span_sample


def _infill_batch_arrays(samples: Sequence[InfillSample]):
    src, src_lens = pad_batch([list(s.source_ids) for s in samples], PAD_ID)
    tgt, tgt_lens = pad_batch([list(s.target_ids) for s in samples], PAD_ID)
    return src, src_lens, tgt, tgt_lens


def mean_infill_nll(
    params: ModelParams,
    samples: Sequence[InfillSample],
    *,
    norm: str = "paper",
    batch_size: int = 64,
) -> float:
    """Mean per-sample infill NLL over a fixed sample list (dropout off)."""
    total = 0.0
    with no_grad():
        graph = params.as_graph(requires_grad=False)
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            src, src_lens, tgt, tgt_lens = _infill_batch_arrays(chunk)
            scores = batched_target_scores(
                graph, params.config, src, src_lens, tgt, tgt_lens,
                scoring="mean", norm=norm,
            )
            total += -float(scores.data.sum())
    return total / len(samples)


def pretrain(
    params: ModelParams,
    vocab: Vocabulary,
    train_instances: Sequence[MCNCInstance],
    dev_instances: Sequence[MCNCInstance],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    test_instances: Sequence[MCNCInstance] | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Minimize the normalized infill NLL; dev metric is dev-set NLL (min).

    Masks are redrawn per epoch on the training side; dev-set masks are
    drawn once up front.  When a test set is given, MCNC accuracy under
    mean scoring is logged each epoch (never used for selection).
    """
    if not train_instances or not dev_instances:
        raise ConfigError("pretrain needs non-empty train and dev sets")
    make_sample = _sample_maker(config.mask_style)
    mask_rng = _rng(config.seed, 1)
    dropout_rng = _rng(config.seed, 2)
    dev_samples = [
        make_sample(inst, vocab, _rng(config.seed, 3, i))
        for i, inst in enumerate(dev_instances)
    ]

    def run_epoch(cur: ModelParams, state: AdamState, order: np.ndarray):
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            samples = [make_sample(train_instances[i], vocab, mask_rng) for i in idx]
            src, src_lens, tgt, tgt_lens = _infill_batch_arrays(samples)
            cell: dict[str, float] = {}

            def builder(t):
                scores = batched_target_scores(
                    t, cur.config, src, src_lens, tgt, tgt_lens,
                    scoring="mean", norm=config.norm, train=True, rng=dropout_rng,
                )
                loss = -scores.mean()
                cell["loss"] = float(loss.data)
                return loss

            grads = grad(builder, cur)
            cur, state = adam_step(cur, grads, state, config)
            total += cell["loss"] * len(idx)
        return cur, state, total / len(order)

    def dev_metric(cur: ModelParams) -> float:
        return mean_infill_nll(cur, dev_samples, norm=config.norm)

    test_metric = None
    if test_instances:
        test_metric = lambda cur: accuracy(  # noqa: E731
            cur, vocab, test_instances, scoring="mean", norm=config.norm
        )

    return _run_stage(
        "pretrain", params, config, len(train_instances),
        run_epoch, dev_metric, "min", out_dir, test_metric,
    )


# --- stage 2: contrastive fine-tuning ---------------------------------------------

def _instance_loss(scores, answers: np.ndarray, config: TrainConfig):
    """Batched fine-tuning loss from raw candidate scores (B, M)."""
    s = softmax_scores(scores)
    if config.loss_kind in ("cot",):
        per = loss_cot(s, answers)
    elif config.loss_kind in ("cross", "classifier"):
        per = loss_cross(s, answers)
    else:
        per = loss_margin(s, answers, config.margin, config.margin_orientation)
    return per.mean()


def finetune(
    params: ModelParams,
    vocab: Vocabulary,
    train_instances: Sequence[MCNCInstance],
    dev_instances: Sequence[MCNCInstance],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    test_instances: Sequence[MCNCInstance] | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Optimize the selected candidate-ranking loss; dev metric is accuracy.

    Each training batch scores every candidate of every instance (M
    forward decodes per instance against one shared encoded source), then
    applies the configured loss to the per-instance softmax scores.  The
    classifier variant scores candidates with the encoder head instead of
    target likelihoods.
    """
    if not train_instances or not dev_instances:
        raise ConfigError("finetune needs non-empty train and dev sets")
    dropout_rng = _rng(config.seed, 2)
    use_head = config.loss_kind == "classifier"
    eval_scoring = "classifier" if use_head else config.scoring

    def run_epoch(cur: ModelParams, state: AdamState, order: np.ndarray):
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            chunk = [train_instances[i] for i in idx]
            answers = np.array([inst.answer_index for inst in chunk])
            cell: dict[str, float] = {}

            def builder(t):
                if use_head:
                    o = batched_classifier_scores(
                        t, cur.config, vocab, chunk, train=True, rng=dropout_rng
                    )
                else:
                    o = batched_candidate_scores(
                        t, cur.config, vocab, chunk,
                        scoring=config.scoring, norm=config.norm,
                        train=True, rng=dropout_rng,
                    )
                loss = _instance_loss(o, answers, config)
                cell["loss"] = float(loss.data)
                return loss

            grads = grad(builder, cur)
            cur, state = adam_step(cur, grads, state, config)
            total += cell["loss"] * len(idx)
        return cur, state, total / len(order)

    def dev_metric(cur: ModelParams) -> float:
        return accuracy(cur, vocab, dev_instances, scoring=eval_scoring, norm=config.norm)

    test_metric = None
    if test_instances:
        test_metric = lambda cur: accuracy(  # noqa: E731
            cur, vocab, test_instances, scoring=eval_scoring, norm=config.norm
        )

    return _run_stage(
        "finetune", params, config, len(train_instances),
        run_epoch, dev_metric, "max", out_dir, test_metric,
    )
