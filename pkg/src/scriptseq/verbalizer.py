"""Rendering events to token sequences and back; vocabulary ownership.

Serialization grammar for an event list::

    <s> (event-tokens-or-<MASK> .)+ </s>

i.e. every item is followed by the separator ".", including the last one
before </s>.  Event tokens are the event's fields in subject, predicate,
object, indirect-object order, lowercased and whitespace-split, with
absent fields omitted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyCorpus, IdOutOfRange
from .events import Event, MCNCInstance, iter_all_events

__all__ = [
    "MASK",
    "BOS_TOKEN",
    "EOS_TOKEN",
    "MASK_TOKEN",
    "PAD_TOKEN",
    "UNK_TOKEN",
    "SEP_TOKEN",
    "SPECIAL_TOKENS",
    "Vocabulary",
    "verbalize_event",
    "verbalize_sequence",
    "build_vocab",
]

BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
MASK_TOKEN = "<MASK>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
SEP_TOKEN = "."

# Fixed ids 0..5, in this order.
SPECIAL_TOKENS = (BOS_TOKEN, EOS_TOKEN, MASK_TOKEN, PAD_TOKEN, UNK_TOKEN, SEP_TOKEN)

BOS_ID, EOS_ID, MASK_ID, PAD_ID, UNK_ID, SEP_ID = range(6)


class _MaskSlot:
    """Sentinel marking a masked event slot in verbalize_sequence input."""

    __slots__ = ()

    def __repr__(self) -> str:
        return MASK_TOKEN


#: The one mask-slot sentinel; use in place of an Event.
MASK = _MaskSlot()


def verbalize_event(event: Event, null_style: str = "omit") -> list[str]:
    """Tokens for one event: subject, predicate, object, indirect object.

    Fields are lowercased and split on whitespace.  Absent fields are
    omitted (null_style="omit") or rendered as the word "null"
    (null_style="literal").
    """
    tokens: list[str] = []
    for field in (event.subject, event.predicate, event.object, event.indirect_object):
        if field is None:
            if null_style == "literal":
                tokens.append("null")
            continue
        tokens.extend(field.lower().split())
    return tokens


def verbalize_sequence(
    items: Sequence[Event | _MaskSlot],
    with_bos_eos: bool = True,
    null_style: str = "omit",
) -> list[str]:
    """Serialize a list of events and/or MASK slots.

    Emits <s>, then each item's tokens (a masked slot emits the single
    <MASK> token) followed by the separator ".", then </s>.
    """
    if not items:
        raise ValueError("cannot verbalize an empty event list")
    tokens: list[str] = [BOS_TOKEN] if with_bos_eos else []
    for item in items:
        if isinstance(item, _MaskSlot):
            tokens.append(MASK_TOKEN)
        else:
            tokens.extend(verbalize_event(item, null_style=null_style))
        tokens.append(SEP_TOKEN)
    if with_bos_eos:
        tokens.append(EOS_TOKEN)
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    """Immutable word-level token table with six fixed special tokens."""

    id_to_token: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "id_to_token", tuple(self.id_to_token))
        if self.id_to_token[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the six special tokens")
        object.__setattr__(
            self, "_token_to_id", {t: i for i, t in enumerate(self.id_to_token)}
        )
        if len(self._token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    @property
    def bos_id(self) -> int:
        return BOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def mask_id(self) -> int:
        return MASK_ID

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    @property
    def sep_id(self) -> int:
        return SEP_ID

    def encode(self, tokens: Iterable[str]) -> list[int]:
        """Map tokens to ids; unseen tokens map to <unk>."""
        t2i = self._token_to_id
        return [t2i.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to tokens; ids outside the table raise IdOutOfRange."""
        out = []
        n = len(self.id_to_token)
        for i in ids:
            if not 0 <= i < n:
                raise IdOutOfRange(f"token id {i} outside [0, {n})")
            out.append(self.id_to_token[i])
        return out

    def save(self, path: str | Path) -> None:
        """One token per line; the line number is the id."""
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


def build_vocab(
    instances: Iterable[MCNCInstance], null_style: str = "omit"
) -> Vocabulary:
    """Vocabulary over every token the corpus verbalizer produces.

    Deterministic: the six specials first, then corpus tokens in order of
    first appearance (scripts before candidates, instance order preserved).
    """
    tokens: list[str] = list(SPECIAL_TOKENS)
    seen = set(SPECIAL_TOKENS)
    empty = True
    for event in iter_all_events(instances):
        empty = False
        for tok in verbalize_event(event, null_style=null_style):
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
    if empty:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    return Vocabulary(tuple(tokens))
