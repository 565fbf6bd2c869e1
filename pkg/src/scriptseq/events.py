"""Domain types for events, scripts, and multiple-choice instances.

An event is a predicate with up to three arguments (subject, object,
indirect object); absent arguments are None, never "".  A script is an
ordered chain of events sharing a protagonist.  An MCNC instance pairs a
script with M candidate next events, exactly one of which is correct.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import AnswerOutOfRange, EmptyPredicate, SchemaError

__all__ = [
    "Event",
    "Script",
    "MCNCInstance",
    "make_event",
    "read_instances",
    "write_instances",
]


@dataclass(frozen=True)
class Event:
    subject: str | None
    predicate: str
    object: str | None
    indirect_object: str | None

    def __post_init__(self):
        if not self.predicate or not self.predicate.strip():
            raise EmptyPredicate(f"predicate must be non-empty, got {self.predicate!r}")


def _clean(arg: str | None) -> str | None:
    """Normalize an optional argument: strip, map empty to None."""
    if arg is None:
        return None
    arg = arg.strip()
    return arg if arg else None


def make_event(
    subject: str | None,
    predicate: str,
    object: str | None = None,
    indirect_object: str | None = None,
) -> Event:
    """Build an Event, normalizing empty/whitespace arguments to None."""
    if predicate is None or not predicate.strip():
        raise EmptyPredicate(f"predicate must be non-empty, got {predicate!r}")
    return Event(_clean(subject), predicate.strip(), _clean(object), _clean(indirect_object))


@dataclass(frozen=True)
class Script:
    """Ordered event chain with a designated protagonist."""

    events: tuple[Event, ...]
    protagonist: str

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if len(self.events) < 1:
            raise SchemaError("script must contain at least one event")
        if all(e.subject != self.protagonist for e in self.events):
            raise SchemaError(
                f"protagonist {self.protagonist!r} is not the subject of any event"
            )


@dataclass(frozen=True)
class MCNCInstance:
    """A script plus M candidate next events, one of them correct."""

    script: Script
    candidates: tuple[Event, ...]
    answer_index: int

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        m = len(self.candidates)
        if not 0 <= self.answer_index < m:
            raise AnswerOutOfRange(
                f"answer index {self.answer_index} outside [0, {m})"
            )
        if len(set(self.candidates)) != m:
            raise SchemaError("candidates must be pairwise distinct")
        prot = self.script.protagonist
        for c in self.candidates:
            if c.subject != prot:
                raise SchemaError(
                    f"candidate subject {c.subject!r} differs from protagonist {prot!r}"
                )

    @property
    def answer(self) -> Event:
        return self.candidates[self.answer_index]


# --- line-delimited JSON serialization --------------------------------------
#
# File layout: one header record {"meta": {"m": M, "script_len": L, "seed": S}}
# followed by one record per instance:
#   {"script": [{"s","v","o","i"}...], "candidates": [...], "answer": int}

def _event_to_obj(e: Event) -> dict:
    return {"s": e.subject, "v": e.predicate, "o": e.object, "i": e.indirect_object}


def _event_from_obj(obj: dict, line: int) -> Event:
    if not isinstance(obj, dict) or "v" not in obj:
        raise SchemaError(f"malformed event record {obj!r}", line)
    try:
        return make_event(obj.get("s"), obj["v"], obj.get("o"), obj.get("i"))
    except EmptyPredicate as exc:
        raise SchemaError(str(exc), line) from exc


def _instance_to_line(inst: MCNCInstance) -> str:
    rec = {
        "script": [_event_to_obj(e) for e in inst.script.events],
        "protagonist": inst.script.protagonist,
        "candidates": [_event_to_obj(e) for e in inst.candidates],
        "answer": inst.answer_index,
    }
    return json.dumps(rec, separators=(",", ":"), sort_keys=True)


def _instance_from_obj(rec: dict, line: int) -> MCNCInstance:
    for key in ("script", "candidates", "answer"):
        if key not in rec:
            raise SchemaError(f"missing field {key!r}", line)
    events = tuple(_event_from_obj(o, line) for o in rec["script"])
    candidates = tuple(_event_from_obj(o, line) for o in rec["candidates"])
    answer = rec["answer"]
    if not isinstance(answer, int) or not 0 <= answer < len(candidates):
        raise AnswerOutOfRange(
            f"line {line}: answer {answer!r} outside [0, {len(candidates)})"
        )
    protagonist = rec.get("protagonist")
    if protagonist is None:
        # Older records: fall back to the most common subject.
        protagonist = events[0].subject
    try:
        script = Script(events, protagonist)
        return MCNCInstance(script, candidates, answer)
    except AnswerOutOfRange:
        raise
    except SchemaError as exc:
        raise SchemaError(str(exc), line) from exc


def write_instances(path: str | Path, instances: Sequence[MCNCInstance], *, seed: int = 0) -> None:
    """Write instances as line-delimited JSON with a one-line meta header.

    Empty instance lists produce an empty file (no header), so that the
    write/read round trip is the identity on the empty list too.
    """
    path = Path(path)
    instances = list(instances)
    with path.open("w", encoding="utf-8") as fh:
        if not instances:
            return
        meta = {
            "meta": {
                "m": len(instances[0].candidates),
                "script_len": len(instances[0].script.events),
                "seed": seed,
            }
        }
        fh.write(json.dumps(meta, separators=(",", ":"), sort_keys=True) + "\n")
        for inst in instances:
            fh.write(_instance_to_line(inst) + "\n")


def read_instances(path: str | Path) -> list[MCNCInstance]:
    """Read a line-delimited instance file written by write_instances."""
    path = Path(path)
    out: list[MCNCInstance] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", lineno) from exc
            if not isinstance(rec, dict):
                raise SchemaError(f"expected object, got {type(rec).__name__}", lineno)
            if "meta" in rec:
                if lineno != 1:
                    raise SchemaError("meta header must be the first line", lineno)
                continue
            out.append(_instance_from_obj(rec, lineno))
    return out


def read_meta(path: str | Path) -> dict | None:
    """Return the meta header of an instance file, or None if absent."""
    with Path(path).open("r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first:
        return None
    rec = json.loads(first)
    return rec.get("meta")


def iter_all_events(instances: Iterable[MCNCInstance]) -> Iterable[Event]:
    """All events of all instances: script events first, then candidates."""
    for inst in instances:
        yield from inst.script.events
        yield from inst.candidates
