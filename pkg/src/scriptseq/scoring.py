"""Likelihood scoring and the training objectives.

A candidate's raw score o is the mean of the per-token log-probabilities
of its serialized form given the script with a trailing mask slot (the
sum over positions 2..N divided by the full token count N; the "sum"
variant skips the normalization, and norm="generated" divides by N-1
instead).  Softmax over the M raw scores gives the final scores s; the
losses below push s toward the correct candidate.

Every loss works on a plain score vector (returning a float) or on
autodiff Tensors of shape (..., M) (returning a Tensor), so the training
graph and the hand-calculation tests exercise the same formulas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import DegenerateScore, EmptyTarget, HeadMissing
from .events import Event, Script
from .masking import InfillSample
from .model import (
    ModelConfig,
    ModelParams,
    batched_logprobs,
    decode_logprobs,
    encode_states,
    encoder_pooled,
    pad_batch,
)
from .verbalizer import MASK, PAD_ID, Vocabulary, verbalize_sequence

__all__ = [
    "ScoreVector",
    "softmax_scores",
    "predict",
    "loss_cot",
    "loss_cross",
    "loss_margin",
    "batched_target_scores",
    "batched_candidate_scores",
    "batched_classifier_scores",
    "candidate_score",
    "infill_nll",
    "score_instances",
    "classifier_score_instances",
]

DEGENERATE_EPS = 1e-12
LOG_FLOOR = 1e-30
XLOGX_FLOOR = 1e-300


@dataclass(frozen=True)
class ScoreVector:
    """Raw and softmax scores for one instance's M candidates."""

    o: np.ndarray
    s: np.ndarray
    t: int | None = None

    @classmethod
    def from_raw(cls, o: Sequence[float], t: int | None = None) -> "ScoreVector":
        o = np.asarray(o, dtype=np.float64)
        return cls(o=o, s=softmax_scores(o), t=t)


def _wrap(x) -> tuple[Tensor, bool]:
    """Lift plain arrays into constant Tensors; report whether we lifted."""
    if isinstance(x, Tensor):
        return x, False
    return Tensor(np.asarray(x, dtype=np.float64)), True


def softmax_scores(o):
    """Stable softmax of the raw scores (max-subtracted)."""
    t, lifted = _wrap(o)
    out = t.softmax(axis=-1)
    return out.data if lifted else out


def predict(o) -> int:
    """Index of the highest score; ties resolve to the lowest index."""
    o = o.data if isinstance(o, Tensor) else np.asarray(o)
    if o.size == 0:
        raise ValueError("cannot predict from an empty score vector")
    return int(np.argmax(o))


def _xlogx(x: Tensor) -> Tensor:
    # x * log(x) extended continuously to x = 0 (the additive floor keeps
    # log finite while leaving any x >= 1e-290 numerically untouched).
    return x * (x + XLOGX_FLOOR).log()


def _gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick idx-th entry along the last axis; idx shape = x.shape[:-1]."""
    if x.ndim == 1:
        return x[int(idx)]
    lead = np.indices(x.shape[:-1])
    return x[(*lead, np.asarray(idx))]


def _negatives_mask(shape: tuple[int, ...], t, dtype) -> np.ndarray:
    mask = np.ones(shape, dtype=dtype)
    if len(shape) == 1:
        mask[int(t)] = 0.0
    else:
        lead = np.indices(shape[:-1])
        mask[(*lead, np.asarray(t))] = 0.0
    return mask


def loss_cot(s, t):
    """Cross entropy on the correct candidate plus the complement term.

    The second term is the negative scaled entropy of the wrong
    candidates' scores renormalized by (1 - s_t); minimizing it spreads
    mass evenly over the wrong candidates.  Both terms are returned as a
    single scalar to be minimized by one optimizer.
    """
    sv, lifted = _wrap(s)
    m = sv.shape[-1]
    if m < 2:
        raise ValueError("need at least two candidates")
    st = _gather_last(sv, t)
    if np.any(st.data >= 1.0 - DEGENERATE_EPS):
        raise DegenerateScore(
            "correct-candidate score is within 1e-12 of 1; complement undefined"
        )
    ce = -(_clamp_min(st, LOG_FLOOR)).log()
    rest = 1.0 - st
    q = sv / (rest.reshape(*rest.shape, 1) if sv.ndim > 1 else rest)
    mask = _negatives_mask(sv.shape, t, sv.dtype)
    complement = (Tensor(mask) * _xlogx(q)).sum(axis=-1) * (1.0 / (m - 1))
    out = ce + complement
    return float(out.data) if lifted else out


def _clamp_min(x: Tensor, floor: float) -> Tensor:
    # max(x, floor) built from relu, so it stays differentiable.
    return (x - floor).relu() + floor


def loss_cross(s, t):
    """Plain cross entropy: -log s_t (clamped so the result stays finite)."""
    sv, lifted = _wrap(s)
    st = _gather_last(sv, t)
    out = -(_clamp_min(st, LOG_FLOOR).log())
    return float(out.data) if lifted else out


def loss_margin(s, t, margin: float = 0.1, orientation: str = "conventional"):
    """Margin ranking loss over the wrong candidates.

    orientation="conventional" penalizes wrong candidates whose score
    comes within `margin` of the correct one: sum_i max(margin - (s_t -
    s_i), 0).  orientation="paper-literal" flips the difference, for exact
    reproduction of the printed formula.
    """
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if orientation not in ("conventional", "paper-literal"):
        raise ValueError(f"unknown orientation {orientation!r}")
    sv, lifted = _wrap(s)
    st = _gather_last(sv, t)
    st_col = st.reshape(*st.shape, 1) if sv.ndim > 1 else st
    if orientation == "conventional":
        diffs = margin - (st_col - sv)
    else:
        diffs = margin - (sv - st_col)
    mask = _negatives_mask(sv.shape, t, sv.dtype)
    out = (Tensor(mask) * diffs.relu()).sum(axis=-1)
    return float(out.data) if lifted else out


# --- sequence scores ----------------------------------------------------------

def _check_modes(scoring: str, norm: str) -> None:
    if scoring not in ("mean", "sum"):
        raise ValueError(f"unknown scoring {scoring!r}")
    if norm not in ("paper", "generated"):
        raise ValueError(f"unknown norm {norm!r}")


def _scores_from_logprobs(
    lp: Tensor, tgt: np.ndarray, tgt_lens: np.ndarray, scoring: str, norm: str
) -> Tensor:
    """Reduce a (B, N-1, V) log-prob tensor to per-sequence scores (B,)."""
    b, n_rows = tgt.shape[0], tgt.shape[1] - 1
    rows = np.broadcast_to(np.arange(b)[:, None], (b, n_rows))
    cols = np.broadcast_to(np.arange(n_rows)[None, :], (b, n_rows))
    picked = lp[(rows, cols, tgt[:, 1:])]
    valid = (cols < (tgt_lens - 1)[:, None]).astype(lp.dtype)
    sums = (picked * Tensor(valid)).sum(axis=-1)
    if scoring == "sum":
        return sums
    denom = tgt_lens if norm == "paper" else tgt_lens - 1
    return sums * Tensor((1.0 / denom).astype(lp.dtype))


def batched_target_scores(
    t: dict[str, Tensor],
    cfg: ModelConfig,
    src: np.ndarray,
    src_lens: np.ndarray,
    tgt: np.ndarray,
    tgt_lens: np.ndarray,
    *,
    scoring: str = "mean",
    norm: str = "paper",
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-sequence target log-probability scores for a padded batch, (B,).

    Sums the realized-token log-probabilities over positions 2..N of each
    target; scoring="mean" divides by N (norm="paper") or N-1
    (norm="generated"), scoring="sum" leaves the raw sum.
    """
    _check_modes(scoring, norm)
    lp = batched_logprobs(t, cfg, src, src_lens, tgt, train=train, rng=rng)
    return _scores_from_logprobs(lp, tgt, tgt_lens, scoring, norm)


def batched_candidate_scores(
    t: dict[str, Tensor],
    cfg: ModelConfig,
    vocab: Vocabulary,
    instances: Sequence,
    *,
    scoring: str = "mean",
    norm: str = "paper",
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Raw score tensor (B, M) for a batch of instances.

    Each instance's masked-script source is encoded once and its M
    candidates are decoded against the repeated encoder states.
    """
    _check_modes(scoring, norm)
    m = len(instances[0].candidates)
    sources, targets = [], []
    for inst in instances:
        if len(inst.candidates) != m:
            raise ValueError("instances in a batch must share the candidate count")
        sources.append(vocab.encode(verbalize_sequence(list(inst.script.events) + [MASK])))
        for cand in inst.candidates:
            targets.append(vocab.encode(verbalize_sequence([cand])))
    src, src_lens = pad_batch(sources, PAD_ID)
    enc = encode_states(t, cfg, src, src_lens, train, rng)
    rep = np.repeat(np.arange(len(instances)), m)
    tgt, tgt_lens = pad_batch(targets, PAD_ID)
    lp = decode_logprobs(t, cfg, enc[rep], src_lens[rep], tgt, train, rng)
    flat = _scores_from_logprobs(lp, tgt, tgt_lens, scoring, norm)
    return flat.reshape(len(instances), m)


def batched_classifier_scores(
    t: dict[str, Tensor],
    cfg: ModelConfig,
    vocab: Vocabulary,
    instances: Sequence,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Classifier-head score tensor (B, M).

    Candidate i is appended to the script and encoded; its score is head
    row i applied to the pooled BOS state of that encoding (one encoder
    pass per candidate, no decoder involved).
    """
    if "cls.w" not in t:
        raise HeadMissing("model has no classifier head")
    m = len(instances[0].candidates)
    sources = []
    for inst in instances:
        for cand in inst.candidates:
            sources.append(
                vocab.encode(verbalize_sequence(list(inst.script.events) + [cand]))
            )
    src, src_lens = pad_batch(sources, PAD_ID)
    pooled = encoder_pooled(t, cfg, src, src_lens, train, rng)
    logits = pooled @ t["cls.w"].swapaxes(0, 1) + t["cls.b"]  # (B*M, M)
    rows = np.arange(len(sources))
    cols = np.tile(np.arange(m), len(instances))
    return logits[(rows, cols)].reshape(len(instances), m)


def classifier_score_instances(
    params: ModelParams,
    vocab: Vocabulary,
    instances: Sequence,
    *,
    batch_size: int = 16,
) -> np.ndarray:
    """No-grad classifier-head score matrix (n_instances, M)."""
    if not instances:
        return np.zeros((0, 0))
    m = len(instances[0].candidates)
    out = np.zeros((len(instances), m), dtype=np.float64)
    with no_grad():
        graph = params.as_graph(requires_grad=False)
        for lo in range(0, len(instances), batch_size):
            chunk = instances[lo : lo + batch_size]
            scores = batched_classifier_scores(graph, params.config, vocab, chunk)
            out[lo : lo + len(chunk)] = scores.data
    return out


def _events_of(script) -> list[Event]:
    return list(script.events) if isinstance(script, Script) else list(script)


def candidate_score(
    params: ModelParams,
    vocab: Vocabulary,
    script,
    candidate: Event,
    *,
    scoring: str = "mean",
    norm: str = "paper",
) -> float:
    """Raw score o of one candidate given a script (dropout off)."""
    source = vocab.encode(verbalize_sequence(_events_of(script) + [MASK]))
    target = vocab.encode(verbalize_sequence([candidate]))
    with no_grad():
        graph = params.as_graph(requires_grad=False)
        src, src_lens = pad_batch([source], PAD_ID)
        tgt, tgt_lens = pad_batch([target], PAD_ID)
        out = batched_target_scores(
            graph, params.config, src, src_lens, tgt, tgt_lens,
            scoring=scoring, norm=norm,
        )
    return float(out.data[0])


def infill_nll(params: ModelParams, sample: InfillSample, *, norm: str = "paper") -> float:
    """Negative normalized target log-likelihood of one infill sample."""
    n = len(sample.target_ids)
    if n < 2:
        raise EmptyTarget(f"target has {n} tokens; nothing to score")
    with no_grad():
        graph = params.as_graph(requires_grad=False)
        src, src_lens = pad_batch([list(sample.source_ids)], PAD_ID)
        tgt, tgt_lens = pad_batch([list(sample.target_ids)], PAD_ID)
        out = batched_target_scores(
            graph, params.config, src, src_lens, tgt, tgt_lens,
            scoring="mean", norm=norm,
        )
    return -float(out.data[0])


def score_instances(
    params: ModelParams,
    vocab: Vocabulary,
    instances: Sequence,
    *,
    scoring: str = "mean",
    norm: str = "paper",
    batch_size: int = 16,
    scorer=None,
) -> np.ndarray:
    """Raw score matrix (n_instances, M) under the given scoring mode.

    The source of an instance is shared by its M candidates, so sources
    are encoded once per instance and candidates decoded against repeated
    encoder states.  `scorer` (script, candidate) -> per-token log-prob
    vector substitutes the model entirely; it exists so tests can pin
    exact likelihoods.
    """
    if not instances:
        return np.zeros((0, 0))
    m = len(instances[0].candidates)
    if scorer is not None:
        out = np.zeros((len(instances), m))
        for i, inst in enumerate(instances):
            for j, cand in enumerate(inst.candidates):
                lps = np.asarray(scorer(inst.script, cand), dtype=np.float64)
                n = len(lps) + 1  # scorer covers positions 2..N
                if scoring == "sum":
                    out[i, j] = lps.sum()
                else:
                    out[i, j] = lps.sum() / (n if norm == "paper" else n - 1)
        return out

    scores = np.zeros((len(instances), m), dtype=np.float64)
    with no_grad():
        graph = params.as_graph(requires_grad=False)
        for lo in range(0, len(instances), batch_size):
            chunk = instances[lo : lo + batch_size]
            out = batched_candidate_scores(
                graph, params.config, vocab, chunk, scoring=scoring, norm=norm
            )
            scores[lo : lo + len(chunk)] = out.data
    return scores
