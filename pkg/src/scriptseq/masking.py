"""Blank-infilling training pairs.

The source is the serialized script-plus-answer with K whole events (or,
for the ablation variant, K arbitrary token spans of the same lengths)
each replaced by a single <MASK> token; the target serializes the masked
material in original order, one segment per mask slot, each segment
followed by the separator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArityMismatch, PlacementFailure, TooFewEvents
from .events import Event, MCNCInstance
from .verbalizer import (
    BOS_TOKEN,
    EOS_TOKEN,
    MASK,
    MASK_ID,
    SEP_TOKEN,
    Vocabulary,
    verbalize_event,
    verbalize_sequence,
)

__all__ = ["InfillSample", "make_infill_sample", "make_random_span_sample", "reconstruct"]

MAX_MASKED_EVENTS = 3
SPAN_PLACEMENT_RETRIES = 100


@dataclass(frozen=True)
class InfillSample:
    """One (source, target) pretraining pair.

    masked_positions are event indices for event-level samples and token
    offsets into the unmasked serialization for span-level samples, always
    strictly increasing.  segment_lengths give the token length of each
    masked segment in the same order, which is what reconstruct() uses to
    split the target back into slot fillers.
    """

    source_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    masked_positions: tuple[int, ...]
    segment_lengths: tuple[int, ...]
    kind: str = "event"  # "event" or "span"


def _original_events(instance: MCNCInstance) -> list[Event]:
    return list(instance.script.events) + [instance.answer]


def _draw_mask_indices(
    n_events: int, rng: np.random.Generator
) -> tuple[int, list[int]]:
    """K ~ uniform{1..3} (capped below n_events), then K indices without
    replacement; any position including the first and last may be masked."""
    if n_events < 3:
        raise TooFewEvents(f"need at least 3 events to mask, got {n_events}")
    k = int(rng.integers(1, MAX_MASKED_EVENTS + 1))
    k = min(k, n_events - 1)
    indices = sorted(int(i) for i in rng.choice(n_events, size=k, replace=False))
    return k, indices


def make_infill_sample(
    instance: MCNCInstance, vocab: Vocabulary, rng: np.random.Generator
) -> InfillSample:
    """Event-level sample: mask K whole events of script + correct answer."""
    events = _original_events(instance)
    _, indices = _draw_mask_indices(len(events), rng)
    index_set = set(indices)
    source_items = [MASK if i in index_set else e for i, e in enumerate(events)]
    masked_events = [events[i] for i in indices]
    source_tokens = verbalize_sequence(source_items)
    target_tokens = verbalize_sequence(masked_events)
    return InfillSample(
        source_ids=tuple(vocab.encode(source_tokens)),
        target_ids=tuple(vocab.encode(target_tokens)),
        masked_positions=tuple(indices),
        segment_lengths=tuple(len(verbalize_event(e)) for e in masked_events),
        kind="event",
    )


def make_random_span_sample(
    instance: MCNCInstance, vocab: Vocabulary, rng: np.random.Generator
) -> InfillSample:
    """Span-level ablation sample.

    Keeps the number and token lengths of the masked segments identical to
    the event-level sample the same rng state would have produced, but
    places the spans at uniformly random token offsets in the serialized
    sequence body, so a span need not align with event boundaries.
    """
    events = _original_events(instance)
    _, indices = _draw_mask_indices(len(events), rng)
    lengths = [len(verbalize_event(events[i])) for i in indices]

    full = verbalize_sequence(events)
    lo, hi = 1, len(full) - 1  # body: everything between <s> and </s>
    for _ in range(SPAN_PLACEMENT_RETRIES):
        starts = [int(rng.integers(lo, hi - ln + 1)) for ln in lengths]
        spans = sorted(zip(starts, lengths))
        if all(
            spans[j][0] + spans[j][1] <= spans[j + 1][0] for j in range(len(spans) - 1)
        ):
            break
    else:
        raise PlacementFailure(
            f"could not place {len(lengths)} disjoint spans in "
            f"{SPAN_PLACEMENT_RETRIES} attempts"
        )

    source_tokens: list[str] = []
    cursor = 0
    for start, ln in spans:
        source_tokens.extend(full[cursor:start])
        source_tokens.append(vocab.id_to_token[MASK_ID])
        cursor = start + ln
    source_tokens.extend(full[cursor:])

    target_tokens: list[str] = [BOS_TOKEN]
    for start, ln in spans:
        target_tokens.extend(full[start : start + ln])
        target_tokens.append(SEP_TOKEN)
    target_tokens.append(EOS_TOKEN)

    return InfillSample(
        source_ids=tuple(vocab.encode(source_tokens)),
        target_ids=tuple(vocab.encode(target_tokens)),
        masked_positions=tuple(s for s, _ in spans),
        segment_lengths=tuple(ln for _, ln in spans),
        kind="span",
    )


def reconstruct(sample: InfillSample, vocab: Vocabulary) -> list[str]:
    """Splice the target segments back into the source mask slots.

    Returns the token list of the unmasked serialization; raises
    ArityMismatch when the mask slot count and target segment count (or
    the target's separator structure) disagree.
    """
    source = vocab.decode(sample.source_ids)
    target = vocab.decode(sample.target_ids)
    n_masks = sum(1 for i in sample.source_ids if i == MASK_ID)
    if n_masks != len(sample.segment_lengths):
        raise ArityMismatch(
            f"{n_masks} mask slots but {len(sample.segment_lengths)} target segments"
        )

    segments: list[list[str]] = []
    pos = 1  # skip <s>
    for ln in sample.segment_lengths:
        end = pos + ln
        if end >= len(target) or target[end] != SEP_TOKEN:
            raise ArityMismatch("target segments do not match the declared lengths")
        segments.append(target[pos:end])
        pos = end + 1
    if pos != len(target) - 1 or target[pos] != EOS_TOKEN:
        raise ArityMismatch("target has trailing material beyond the declared segments")

    out: list[str] = []
    seg_iter = iter(segments)
    for tok in source:
        if tok == vocab.id_to_token[MASK_ID]:
            out.extend(next(seg_iter))
        else:
            out.append(tok)
    return out
