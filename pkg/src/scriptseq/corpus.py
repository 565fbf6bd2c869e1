"""Synthetic MCNC benchmark generation.

A SchemaGrammar holds named event-chain templates over entity pools.  A
chain instantiation binds each ``$pool`` variable once, so templates can
re-use an entity across positions (which is what makes the final event of
the built-in "errands" grammar a deterministic function of the earlier
ones).  Negative candidates keep the script's protagonist and redraw the
predicate and arguments from the same document's events.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GrammarTooShort, PoolExhausted, SchemaError
from .events import Event, MCNCInstance, Script, write_instances

__all__ = [
    "EventPattern",
    "Schema",
    "BranchOption",
    "SchemaGrammar",
    "SplitSpec",
    "generate_chain",
    "sample_negatives",
    "build_dataset",
    "build_length_bias_dataset",
    "load_grammar",
    "builtin_grammar",
    "BUILTIN_GRAMMARS",
]

CHAIN_LEN = 9  # script events plus the positive candidate


@dataclass(frozen=True)
class EventPattern:
    """Template for one event: fixed predicate, slot specs for arguments.

    A slot spec is None (absent), a literal string, or "$name" referencing
    an entity pool.
    """

    predicate: str
    object: str | None = None
    indirect_object: str | None = None


@dataclass(frozen=True)
class Schema:
    name: str
    events: tuple[EventPattern, ...]


@dataclass(frozen=True)
class BranchOption:
    weight: float
    event: EventPattern


@dataclass(frozen=True)
class SchemaGrammar:
    schemas: tuple[Schema, ...]
    protagonists: tuple[str, ...]
    pools: dict[str, tuple[str, ...]]
    # (schema name, position) -> weighted alternatives replacing the template event
    branches: dict[tuple[str, int], tuple[BranchOption, ...]] = field(default_factory=dict)
    script_len: int = 8
    m: int = 5
    distractor_events: int = 12
    negative_predicate: str = "resample"  # or "keep"

    def __post_init__(self):
        if not self.schemas:
            raise SchemaError("grammar needs at least one schema")
        if not self.protagonists:
            raise SchemaError("grammar needs at least one protagonist")
        if self.negative_predicate not in ("resample", "keep"):
            raise SchemaError(
                f"negative_predicate must be 'resample' or 'keep', "
                f"got {self.negative_predicate!r}"
            )
        for key, options in self.branches.items():
            total = sum(o.weight for o in options)
            if any(o.weight < 0 for o in options) or abs(total - 1.0) > 1e-9:
                raise SchemaError(
                    f"branch weights at {key} must be nonnegative and sum to 1"
                )
        for schema in self.schemas:
            for pat in schema.events:
                for slot in (pat.object, pat.indirect_object):
                    if slot and slot.startswith("$") and slot[1:] not in self.pools:
                        raise SchemaError(f"unknown entity pool {slot!r} in schema {schema.name!r}")
        for (name, _pos), options in self.branches.items():
            if name not in {s.name for s in self.schemas}:
                raise SchemaError(f"branch references unknown schema {name!r}")
            for opt in options:
                for slot in (opt.event.object, opt.event.indirect_object):
                    if slot and slot.startswith("$") and slot[1:] not in self.pools:
                        raise SchemaError(f"unknown entity pool {slot!r} in branch for {name!r}")

    def with_protagonists(self, protagonists: Sequence[str]) -> "SchemaGrammar":
        return replace(self, protagonists=tuple(protagonists))


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    dev_count: int
    test_count: int
    seed: int = 0

    def __post_init__(self):
        for name in ("train_count", "dev_count", "test_count"):
            if getattr(self, name) < 0:
                raise SchemaError(f"{name} must be nonnegative")


# --- grammar file format ----------------------------------------------------

def _pattern_from_list(lst, where: str) -> EventPattern:
    if not isinstance(lst, (list, tuple)) or not 1 <= len(lst) <= 3:
        raise SchemaError(f"{where}: event pattern must be [predicate, object?, iobject?]")
    pred = lst[0]
    obj = lst[1] if len(lst) > 1 else None
    iobj = lst[2] if len(lst) > 2 else None
    if not isinstance(pred, str) or not pred.strip():
        raise SchemaError(f"{where}: predicate must be a non-empty string")
    return EventPattern(pred, obj, iobj)


def grammar_from_dict(data: dict) -> SchemaGrammar:
    try:
        entities = data["entities"]
        schemas = tuple(
            Schema(
                s["name"],
                tuple(
                    _pattern_from_list(e, f"schema {s['name']!r}") for e in s["events"]
                ),
            )
            for s in data["schemas"]
        )
        branches: dict[tuple[str, int], tuple[BranchOption, ...]] = {}
        for name, by_pos in data.get("branches", {}).items():
            for pos, options in by_pos.items():
                branches[(name, int(pos))] = tuple(
                    BranchOption(
                        float(o["weight"]),
                        _pattern_from_list(o["event"], f"branch {name}:{pos}"),
                    )
                    for o in options
                )
        return SchemaGrammar(
            schemas=schemas,
            protagonists=tuple(entities["protagonists"]),
            pools={k: tuple(v) for k, v in entities.get("pools", {}).items()},
            branches=branches,
            script_len=int(data.get("script_len", 8)),
            m=int(data.get("m", 5)),
            distractor_events=int(data.get("distractors", 12)),
            negative_predicate=data.get("negative_predicate", "resample"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed grammar: {exc}") from exc


def grammar_to_dict(g: SchemaGrammar) -> dict:
    by_schema: dict[str, dict] = {}
    for (name, pos), options in g.branches.items():
        by_schema.setdefault(name, {})[str(pos)] = [
            {"weight": o.weight, "event": [o.event.predicate, o.event.object, o.event.indirect_object]}
            for o in options
        ]
    return {
        "script_len": g.script_len,
        "m": g.m,
        "distractors": g.distractor_events,
        "negative_predicate": g.negative_predicate,
        "entities": {
            "protagonists": list(g.protagonists),
            "pools": {k: list(v) for k, v in g.pools.items()},
        },
        "schemas": [
            {
                "name": s.name,
                "events": [[p.predicate, p.object, p.indirect_object] for p in s.events],
            }
            for s in g.schemas
        ],
        "branches": by_schema,
    }


def load_grammar(path: str | Path) -> SchemaGrammar:
    """Load a grammar JSON file, or a built-in via the "builtin:NAME" form."""
    text = str(path)
    if text.startswith("builtin:"):
        return builtin_grammar(text.split(":", 1)[1])
    p = Path(path)
    if not p.exists():
        raise SchemaError(f"grammar file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"grammar file {p} is not valid JSON: {exc}") from exc
    return grammar_from_dict(data)


def save_grammar(grammar: SchemaGrammar, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(grammar_to_dict(grammar), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


# --- chain generation -------------------------------------------------------

class _Bindings:
    """Per-chain variable store: each $pool variable is drawn once."""

    def __init__(self, pools: dict[str, tuple[str, ...]], rng: np.random.Generator):
        self.pools = pools
        self.rng = rng
        self.values: dict[str, str] = {}

    def resolve(self, slot: str | None) -> str | None:
        if slot is None or not slot.startswith("$"):
            return slot
        name = slot[1:]
        if name not in self.values:
            pool = self.pools[name]
            self.values[name] = pool[int(self.rng.integers(len(pool)))]
        return self.values[name]


def _instantiate(
    pattern: EventPattern, protagonist: str, bindings: _Bindings
) -> Event:
    return Event(
        protagonist,
        pattern.predicate,
        bindings.resolve(pattern.object),
        bindings.resolve(pattern.indirect_object),
    )


def _pattern_at(
    grammar: SchemaGrammar, schema: Schema, pos: int, rng: np.random.Generator
) -> EventPattern:
    options = grammar.branches.get((schema.name, pos))
    if not options:
        return schema.events[pos]
    weights = np.array([o.weight for o in options])
    idx = int(rng.choice(len(options), p=weights))
    return options[idx].event


def generate_chain(
    grammar: SchemaGrammar, rng: np.random.Generator
) -> tuple[list[Event], list[Event], str]:
    """Instantiate one document.

    Returns (document_events, chain, protagonist) where the chain is the
    first script_len + 1 events and document_events additionally contain
    the rest of the schema plus distractor events instantiated from other
    schemas under the same protagonist (same schema if there is only one).
    """
    chain_len = grammar.script_len + 1
    eligible = [s for s in grammar.schemas if len(s.events) >= chain_len]
    if not eligible:
        raise GrammarTooShort(
            f"no schema reaches length {chain_len} "
            f"(max is {max(len(s.events) for s in grammar.schemas)})"
        )
    schema = eligible[int(rng.integers(len(eligible)))]
    protagonist = grammar.protagonists[int(rng.integers(len(grammar.protagonists)))]

    bindings = _Bindings(grammar.pools, rng)
    schema_events = [
        _instantiate(_pattern_at(grammar, schema, pos, rng), protagonist, bindings)
        for pos in range(len(schema.events))
    ]
    chain = schema_events[:chain_len]

    others = [s for s in grammar.schemas if s.name != schema.name] or [schema]
    distractors = []
    for _ in range(grammar.distractor_events):
        other = others[int(rng.integers(len(others)))]
        pos = int(rng.integers(len(other.events)))
        local = _Bindings(grammar.pools, rng)
        distractors.append(
            _instantiate(_pattern_at(grammar, other, pos, rng), protagonist, local)
        )
    return schema_events + distractors, chain, protagonist


def sample_negatives(
    positive: Event,
    document_events: Sequence[Event],
    protagonist: str,
    count: int,
    rng: np.random.Generator,
    *,
    negative_predicate: str = "resample",
    max_attempts: int = 1000,
) -> list[Event]:
    """Draw `count` distinct wrong candidates from the document's pools.

    Each negative keeps the protagonist as subject; its predicate is
    redrawn from the document's predicates (or kept, with
    negative_predicate="keep") and its arguments from the document's
    attested objects / indirect objects (None entries included, so absent
    arguments occur at their natural rate).
    """
    if count == 0:
        return []
    if not document_events:
        raise PoolExhausted("document has no events to sample arguments from")
    predicates = [e.predicate for e in document_events]
    objects = [e.object for e in document_events]
    iobjects = [e.indirect_object for e in document_events]

    negatives: list[Event] = []
    chosen: set[Event] = set()
    for _ in range(count):
        for _attempt in range(max_attempts):
            pred = (
                positive.predicate
                if negative_predicate == "keep"
                else predicates[int(rng.integers(len(predicates)))]
            )
            obj = objects[int(rng.integers(len(objects)))]
            iobj = iobjects[int(rng.integers(len(iobjects)))]
            cand = Event(protagonist, pred, obj, iobj)
            if cand != positive and cand not in chosen:
                negatives.append(cand)
                chosen.add(cand)
                break
        else:
            raise PoolExhausted(
                f"could not draw {count} distinct negatives in {max_attempts} attempts"
            )
    return negatives


def _instance_rng(seed: int, split_idx: int, i: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, split_idx, i])))


def _partition_protagonists(
    names: tuple[str, ...]
) -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
    """Deterministically split protagonists across train/dev/test.

    Instances of different splits then never share a (schema, protagonist)
    combination.  With fewer than three names the pool is shared.
    """
    n = len(names)
    if n < 3:
        return names, names, names
    n_dev = max(1, n // 6)
    n_test = max(1, n // 6)
    n_train = n - n_dev - n_test
    return (
        names[:n_train],
        names[n_train : n_train + n_dev],
        names[n_train + n_dev :],
    )


def _make_instance(
    grammar: SchemaGrammar, rng: np.random.Generator
) -> MCNCInstance:
    document, chain, protagonist = generate_chain(grammar, rng)
    script = Script(tuple(chain[: grammar.script_len]), protagonist)
    positive = chain[grammar.script_len]
    negatives = sample_negatives(
        positive,
        document,
        protagonist,
        grammar.m - 1,
        rng,
        negative_predicate=grammar.negative_predicate,
    )
    ordered = [positive] + negatives
    perm = rng.permutation(grammar.m)
    candidates = tuple(ordered[j] for j in perm)
    answer = int(np.nonzero(perm == 0)[0][0])
    return MCNCInstance(script, candidates, answer)


def build_dataset(
    grammar: SchemaGrammar, spec: SplitSpec, out_dir: str | Path
) -> dict[str, Path]:
    """Write train/dev/test instance files; bytes are a pure function of inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = _partition_protagonists(grammar.protagonists)
    counts = (spec.train_count, spec.dev_count, spec.test_count)
    paths: dict[str, Path] = {}
    for split_idx, (split, count, prots) in enumerate(
        zip(("train", "dev", "test"), counts, parts)
    ):
        split_grammar = grammar.with_protagonists(prots)
        instances = [
            _make_instance(split_grammar, _instance_rng(spec.seed, split_idx, i))
            for i in range(count)
        ]
        path = out_dir / f"{split}.jsonl"
        write_instances(path, instances, seed=spec.seed)
        paths[split] = path
    return paths


# --- length-bias benchmark ---------------------------------------------------

def _final_branch_options(grammar: SchemaGrammar) -> tuple[BranchOption, ...]:
    key = (grammar.schemas[0].name, grammar.script_len)
    options = grammar.branches.get(key)
    if not options:
        raise SchemaError("grammar has no branch at the final chain position")
    return options


def build_length_bias_dataset(
    spec: SplitSpec, out_dir: str | Path, grammar: SchemaGrammar | None = None
) -> dict[str, Path]:
    """Write a benchmark whose test split opposes mean- and sum-scoring.

    Train/dev instances are assembled as usual.  Test instances keep only
    chains whose final event is a long-form branch option (it has an
    object), and use the short-form options (predicate only) as the wrong
    candidates.  Per-token likelihoods of a model trained on this corpus
    then favor the long correct candidate under mean scoring but the short
    distractors under sum scoring.

    Unlike build_dataset, the protagonist pool is shared across splits:
    this benchmark probes the scoring rule on in-distribution likelihoods,
    so test-only protagonist tokens (which would encode to <unk>) are
    unwanted noise here.
    """
    grammar = grammar or builtin_grammar("length-bias")
    options = _final_branch_options(grammar)
    short_patterns = [o.event for o in options if o.event.object is None]
    if len(short_patterns) < grammar.m - 1:
        raise SchemaError(
            f"need at least {grammar.m - 1} short final options, got {len(short_patterns)}"
        )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = (grammar.protagonists,) * 3
    counts = (spec.train_count, spec.dev_count, spec.test_count)
    paths: dict[str, Path] = {}
    for split_idx, (split, count, prots) in enumerate(
        zip(("train", "dev", "test"), counts, parts)
    ):
        split_grammar = grammar.with_protagonists(prots)
        instances = []
        for i in range(count):
            rng = _instance_rng(spec.seed, split_idx, i)
            if split != "test":
                instances.append(_make_instance(split_grammar, rng))
                continue
            # Redraw until the chain ends in a long-form event.
            for _ in range(1000):
                _doc, chain, protagonist = generate_chain(split_grammar, rng)
                positive = chain[grammar.script_len]
                if positive.object is not None:
                    break
            else:
                raise PoolExhausted("could not draw a long-form final event")
            script = Script(tuple(chain[: grammar.script_len]), protagonist)
            shorts = [
                Event(protagonist, p.predicate, None, None) for p in short_patterns
            ]
            picks = rng.permutation(len(shorts))[: grammar.m - 1]
            ordered = [positive] + [shorts[j] for j in picks]
            perm = rng.permutation(grammar.m)
            candidates = tuple(ordered[j] for j in perm)
            answer = int(np.nonzero(perm == 0)[0][0])
            instances.append(MCNCInstance(script, candidates, answer))
        path = out_dir / f"{split}.jsonl"
        write_instances(path, instances, seed=spec.seed)
        paths[split] = path
    return paths


# --- built-in grammars --------------------------------------------------------

def _errands_grammar() -> SchemaGrammar:
    """Deterministic grammar: the final chain event re-uses an entity bound
    earlier, so it is a function of the first eight events."""
    ev = EventPattern
    schemas = (
        Schema("restaurant", (
            ev("enter", "$place"), ev("greet", "waiter"), ev("read", "menu"),
            ev("order", "$dish"), ev("eat", "$dish"), ev("sip", "$drink"),
            ev("praise", "chef"), ev("request", "bill"),
            ev("pay_for", "$dish"), ev("exit", "$place"),
        )),
        Schema("library", (
            ev("visit", "$hall"), ev("browse", "shelves"), ev("find", "$book"),
            ev("read", "$book"), ev("copy", "notes"), ev("ask", "librarian"),
            ev("renew", "card"), ev("pack", "bag"),
            ev("return", "$book"), ev("leave", "$hall"),
        )),
        Schema("market", (
            ev("reach", "$market"), ev("grab", "cart"), ev("pick", "$fruit"),
            ev("weigh", "$fruit"), ev("fetch", "$staple"), ev("join", "queue"),
            ev("greet", "cashier"), ev("swipe", "card"),
            ev("bag", "$fruit"), ev("push", "cart"),
        )),
        Schema("gym", (
            ev("join", "$gym"), ev("meet", "trainer"), ev("stretch", "legs"),
            ev("lift", "$gear"), ev("rack", "$gear"), ev("run", "treadmill"),
            ev("towel", "sweat"), ev("drink", "water"),
            ev("wipe", "$gear"), ev("leave", "$gym"),
        )),
    )
    pools = {
        "place": ("diner", "bistro", "tavern", "cafe"),
        "dish": ("salad", "soup", "pasta", "curry", "omelet", "stew"),
        "drink": ("cola", "tea", "coffee", "juice"),
        "hall": ("archive", "annex", "atrium"),
        "book": ("atlas", "novel", "almanac", "chronicle", "manual"),
        "market": ("bazaar", "grocery", "fairground"),
        "fruit": ("apples", "pears", "plums", "grapes", "melons"),
        "staple": ("rice", "flour", "beans", "lentils"),
        "gym": ("dojo", "arena", "studio"),
        "gear": ("barbell", "kettlebell", "dumbbell", "machine"),
    }
    protagonists = (
        "jimmy", "clara", "victor", "nadia", "felix", "irene",
        "oscar", "tessa", "hugo", "marie", "simon", "paula",
    )
    return SchemaGrammar(schemas=schemas, protagonists=protagonists, pools=pools)


def _length_bias_grammar() -> SchemaGrammar:
    """Stochastic grammar: the final event is either one of eight long forms
    (predicate plus a fixed five-word object and four-word indirect object)
    or one of four short forms (predicate only).  Short forms are
    individually a bit more probable than long forms, and the infilling
    objective's per-sample length normalization further shifts the trained
    model's mass toward short targets, so a short distractor reliably
    wins under sum scoring while the many near-deterministic tokens of the
    long form win under mean scoring."""
    ev = EventPattern
    long_forms = [
        ev("chart", "the cold grey northern strait", "a torn paper map"),
        ev("stow", "the heavy wet canvas sail", "a deep wooden chest"),
        ev("scrub", "the wide dusty upper deck", "a stiff birch brush"),
        ev("splice", "the long frayed mooring rope", "a bent steel hook"),
        ev("caulk", "the worn creaky forward hull", "a full pine bucket"),
        ev("hoist", "the bright red storm flag", "a very tall mast"),
        ev("log", "the slow quiet evening watch", "a thick leather book"),
        ev("rig", "the old rusty spare anchor", "a huge iron chain"),
    ]
    short_forms = [ev("rest"), ev("whistle"), ev("pace"), ev("doze")]
    options = tuple(
        [BranchOption(0.6 / len(long_forms), e) for e in long_forms]
        + [BranchOption(0.4 / len(short_forms), e) for e in short_forms]
    )
    schema = Schema("voyage", (
        ev("board", "$vessel"), ev("salute", "captain"), ev("check", "$kit"),
        ev("coil", "ropes"), ev("raise", "$vessel"), ev("watch", "horizon"),
        ev("trim", "$kit"), ev("ring", "bell"),
        ev("rest",),  # placeholder, replaced by the branch below
    ))
    pools = {
        "vessel": ("sloop", "ketch", "schooner", "cutter"),
        "kit": ("compass", "lantern", "spyglass", "sextant"),
    }
    protagonists = (
        "arlo", "bess", "cyrus", "dora", "edgar", "flora", "gideon", "hazel",
    )
    return SchemaGrammar(
        schemas=(schema,),
        protagonists=protagonists,
        pools=pools,
        branches={("voyage", 8): options},
    )


BUILTIN_GRAMMARS = {
    "errands": _errands_grammar,
    "length-bias": _length_bias_grammar,
}


def builtin_grammar(name: str) -> SchemaGrammar:
    try:
        return BUILTIN_GRAMMARS[name]()
    except KeyError:
        raise SchemaError(
            f"unknown built-in grammar {name!r}; available: {sorted(BUILTIN_GRAMMARS)}"
        ) from None
