"""MCNC evaluation, per-token diagnostics, and the ablation battery.

evaluate() is read-only over the model and records per-instance raw and
softmax scores so the reported accuracy can be recomputed from the
records alone.  run_ablations() trains and scores the pipeline variants
(shared stages are trained once and reused) and renders the results as a
machine-readable JSON table plus fixed-width text.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .events import Event, MCNCInstance, read_instances
from .model import (
    ModelConfig,
    ModelParams,
    add_classifier_head,
    forward_logprobs,
    gather_target_logprobs,
    init_params,
)
from .scoring import (
    classifier_score_instances,
    score_instances,
    softmax_scores,
)
from .training import TrainConfig, finetune, pretrain
from .verbalizer import MASK, Vocabulary, build_vocab, verbalize_sequence

logger = logging.getLogger(__name__)

__all__ = [
    "EvalReport",
    "TokenTrace",
    "evaluate",
    "token_trace",
    "run_ablations",
    "ABLATION_ROWS",
]


@dataclass
class EvalReport:
    accuracy: float
    n_instances: int
    records: list[dict] = field(default_factory=list)
    fingerprint: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        """Line-delimited JSON: one summary line, then one line per instance."""
        with Path(path).open("w", encoding="utf-8") as fh:
            summary = {
                "accuracy": self.accuracy,
                "n_instances": self.n_instances,
                "fingerprint": self.fingerprint,
            }
            fh.write(json.dumps(summary, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def evaluate(
    params: ModelParams,
    vocab: Vocabulary,
    instances: Sequence[MCNCInstance],
    *,
    scoring: str = "mean",
    norm: str = "paper",
    batch_size: int = 32,
    scorer: Callable | None = None,
    fingerprint: dict | None = None,
) -> EvalReport:
    """Score every instance, pick the argmax candidate, aggregate accuracy.

    scoring is "mean", "sum", or "classifier" (encoder-head scores).  A
    custom `scorer` (script, candidate) -> per-token log-probs replaces
    the model for likelihood modes; tests use it to pin exact scores.
    """
    if not instances:
        raise ConfigError("evaluate needs a non-empty dataset")
    if scoring == "classifier":
        o_matrix = classifier_score_instances(
            params, vocab, instances, batch_size=batch_size
        )
    else:
        o_matrix = score_instances(
            params, vocab, instances,
            scoring=scoring, norm=norm, batch_size=batch_size, scorer=scorer,
        )
    records = []
    correct = 0
    for i, inst in enumerate(instances):
        o = o_matrix[i]
        s = softmax_scores(o)
        chosen = int(np.argmax(o))
        correct += int(chosen == inst.answer_index)
        records.append(
            {
                "index": i,
                "chosen": chosen,
                "answer": inst.answer_index,
                "o": [float(x) for x in o],
                "s": [float(x) for x in s],
            }
        )
    fp = {"scoring": scoring, "norm": norm}
    if fingerprint:
        fp.update(fingerprint)
    return EvalReport(
        accuracy=correct / len(instances),
        n_instances=len(instances),
        records=records,
        fingerprint=fp,
    )


# --- per-token diagnostics ----------------------------------------------------

@dataclass(frozen=True)
class TokenTrace:
    """(token, negative log generation probability) pairs for one candidate.

    Higher values mean the token was harder to generate.  Entries cover
    every scored position: the candidate's words, the separator, and the
    closing </s>.
    """

    entries: tuple[tuple[str, float], ...]

    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.entries])

    def to_tsv(self) -> str:
        lines = ["token\tneg_logprob"]
        lines += [f"{tok}\t{val:.6f}" for tok, val in self.entries]
        return "\n".join(lines) + "\n"


def token_trace(
    params: ModelParams, vocab: Vocabulary, script, candidate: Event
) -> TokenTrace:
    """Per-token -log P for one candidate given the masked script."""
    events = list(script.events) if hasattr(script, "events") else list(script)
    source = vocab.encode(verbalize_sequence(events + [MASK]))
    target_tokens = verbalize_sequence([candidate])
    target = vocab.encode(target_tokens)
    L = forward_logprobs(params, source, target)
    ll = gather_target_logprobs(L, target)
    return TokenTrace(
        entries=tuple(
            (tok, float(-v)) for tok, v in zip(target_tokens[1:], ll)
        )
    )


# --- ablation battery ------------------------------------------------------------

ABLATION_ROWS = (
    "full",
    "no_pretrain",
    "no_finetune",
    "linear_classifier",
    "span_mask",
    "sum_scoring",
    "cross_entropy",
    "margin_ranking",
)


def _load_split(dataset_dir: Path, split: str) -> list[MCNCInstance]:
    path = dataset_dir / f"{split}.jsonl"
    if not path.exists():
        raise ConfigError(f"missing dataset split: {path}")
    return read_instances(path)


def render_table(rows: list[dict], columns: tuple[str, ...]) -> str:
    widths = {
        c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in columns
    }
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    sep = "  ".join("-" * widths[c] for c in columns)
    body = [
        "  ".join(_fmt(r.get(c)).ljust(widths[c]) for c in columns) for r in rows
    ]
    return "\n".join([header, sep, *body]) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def run_ablations(
    dataset_dir: str | Path,
    out_dir: str | Path,
    *,
    model_kwargs: dict,
    pretrain_config: TrainConfig,
    finetune_config: TrainConfig,
    rows: Sequence[str] = ABLATION_ROWS,
    save_checkpoints: bool = False,
) -> list[dict]:
    """Train and evaluate the requested pipeline variants on one dataset.

    Variants sharing a stage reuse it: the event-level pretrained model
    backs every row except no_pretrain and span_mask, and the span-level
    pretrained model is trained only when span_mask is requested.  Writes
    ablations.json and ablations.txt under out_dir and returns the rows.
    """
    unknown = set(rows) - set(ABLATION_ROWS)
    if unknown:
        raise ConfigError(f"unknown ablation rows: {sorted(unknown)}")
    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = _load_split(dataset_dir, "train")
    dev = _load_split(dataset_dir, "dev")
    test = _load_split(dataset_dir, "test")
    vocab = build_vocab(train)
    m = len(train[0].candidates)
    base_config = ModelConfig(vocab_size=len(vocab), **model_kwargs)
    base = init_params(base_config)
    norm = finetune_config.norm

    stage_cache: dict[str, ModelParams] = {}

    def stage1(style: str) -> ModelParams:
        if style not in stage_cache:
            cfg = TrainConfig(**{**asdict(pretrain_config), "mask_style": style})
            ckpt_dir = out_dir / f"stage1-{style}" if save_checkpoints else None
            logger.info("ablations: pretraining (%s masks)", style)
            stage_cache[style], _ = pretrain(base, vocab, train, dev, cfg, ckpt_dir)
        return stage_cache[style]

    def tuned(start: ModelParams, name: str, **overrides) -> ModelParams:
        cfg = TrainConfig(**{**asdict(finetune_config), **overrides})
        ckpt_dir = out_dir / f"stage2-{name}" if save_checkpoints else None
        logger.info("ablations: fine-tuning row %s", name)
        tuned_params, _ = finetune(start, vocab, train, dev, cfg, ckpt_dir)
        return tuned_params

    def acc(params: ModelParams, scoring: str) -> float:
        return evaluate(
            params, vocab, test, scoring=scoring, norm=norm
        ).accuracy

    results: list[dict] = []
    for row in rows:
        if row == "full":
            value = acc(tuned(stage1("event"), row), finetune_config.scoring)
        elif row == "no_pretrain":
            value = acc(tuned(base, row), finetune_config.scoring)
        elif row == "no_finetune":
            value = acc(stage1("event"), finetune_config.scoring)
        elif row == "linear_classifier":
            start = add_classifier_head(stage1("event"), m)
            value = acc(tuned(start, row, loss_kind="classifier"), "classifier")
        elif row == "span_mask":
            value = acc(tuned(stage1("span"), row), finetune_config.scoring)
        elif row == "sum_scoring":
            value = acc(tuned(stage1("event"), row, scoring="sum"), "sum")
        elif row == "cross_entropy":
            value = acc(tuned(stage1("event"), row, loss_kind="cross"), finetune_config.scoring)
        else:  # margin_ranking
            value = acc(tuned(stage1("event"), row, loss_kind="margin"), finetune_config.scoring)
        results.append({"variant": row, "accuracy": value})
        logger.info("ablations: %s -> %.4f", row, value)

    (out_dir / "ablations.json").write_text(
        json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out_dir / "ablations.txt").write_text(
        render_table(results, ("variant", "accuracy")), encoding="utf-8"
    )
    return results

