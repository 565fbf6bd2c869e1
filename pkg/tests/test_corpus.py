import json

import numpy as np
import pytest

from scriptseq.corpus import (
    EventPattern,
    Schema,
    SchemaGrammar,
    SplitSpec,
    build_dataset,
    build_length_bias_dataset,
    builtin_grammar,
    generate_chain,
    grammar_from_dict,
    grammar_to_dict,
    load_grammar,
    sample_negatives,
    save_grammar,
)
from scriptseq.errors import GrammarTooShort, PoolExhausted, SchemaError
from scriptseq.events import Event, read_instances


def rng(seed=0):
    return np.random.default_rng(seed)


def test_generate_chain_shape_and_protagonist():
    g = builtin_grammar("errands")
    doc, chain, prot = generate_chain(g, rng(7))
    assert len(chain) == 9
    assert all(e.subject == prot for e in chain)
    assert set(chain) <= set(doc)
    assert len(doc) == 10 + g.distractor_events


def test_generate_chain_deterministic():
    g = builtin_grammar("errands")
    a = generate_chain(g, rng(5))
    b = generate_chain(g, rng(5))
    assert a == b


def test_generate_chain_grammar_too_short():
    g = SchemaGrammar(
        schemas=(Schema("stub", tuple(EventPattern(f"v{i}") for i in range(5))),),
        protagonists=("p",),
        pools={},
    )
    with pytest.raises(GrammarTooShort):
        generate_chain(g, rng(0))


def test_final_chain_event_reuses_bound_entity():
    # deterministic grammar: the trailing event's object appears earlier
    g = builtin_grammar("errands")
    for seed in range(20):
        _, chain, _ = generate_chain(g, rng(seed))
        if chain[8].object is not None:
            earlier = {e.object for e in chain[:8]}
            assert chain[8].object in earlier


# --- negative sampling ------------------------------------------------------

def _document(prot="pat", n=20):
    return [
        Event(prot, f"v{i % 7}", f"o{i % 5}", f"i{i % 3}" if i % 2 else None)
        for i in range(n)
    ]


def test_sample_negatives_properties():
    doc = _document()
    pos = doc[3]
    negs = sample_negatives(pos, doc, "pat", 4, rng(1))
    assert len(negs) == 4
    assert len(set(negs)) == 4
    assert all(n.subject == "pat" for n in negs)
    assert all(n != pos for n in negs)
    doc_preds = {e.predicate for e in doc}
    doc_objs = {e.object for e in doc}
    for n in negs:
        assert n.predicate in doc_preds
        assert n.object in doc_objs


def test_sample_negatives_keep_mode():
    doc = _document()
    pos = doc[0]
    negs = sample_negatives(pos, doc, "pat", 3, rng(2), negative_predicate="keep")
    assert all(n.predicate == pos.predicate for n in negs)


def test_sample_negatives_zero_count():
    assert sample_negatives(_document()[0], _document(), "pat", 0, rng(0)) == []


def test_sample_negatives_pool_exhausted():
    pos = Event("pat", "v", "o", None)
    doc = [pos] * 5
    with pytest.raises(PoolExhausted):
        sample_negatives(pos, doc, "pat", 2, rng(0))


# --- dataset builds -----------------------------------------------------------

def test_build_dataset_counts_and_determinism(tmp_path):
    g = builtin_grammar("errands")
    spec = SplitSpec(30, 8, 8, seed=13)
    paths1 = build_dataset(g, spec, tmp_path / "a")
    paths2 = build_dataset(g, spec, tmp_path / "b")
    for split, expect in (("train", 30), ("dev", 8), ("test", 8)):
        assert len(read_instances(paths1[split])) == expect
        assert paths1[split].read_bytes() == paths2[split].read_bytes()


def test_build_dataset_instance_invariants(tmp_path):
    g = builtin_grammar("errands")
    paths = build_dataset(g, SplitSpec(25, 0, 0, seed=3), tmp_path)
    for inst in read_instances(paths["train"]):
        assert len(inst.script.events) == 8
        assert len(inst.candidates) == 5
        prot = inst.script.protagonist
        assert all(c.subject == prot for c in inst.candidates)
        # exactly one candidate matches the answer slot
        assert inst.candidates.count(inst.answer) == 1


def test_splits_use_disjoint_protagonists(tmp_path):
    g = builtin_grammar("errands")
    paths = build_dataset(g, SplitSpec(40, 10, 10, seed=4), tmp_path)
    prots = {
        split: {i.script.protagonist for i in read_instances(p)}
        for split, p in paths.items()
    }
    assert not prots["train"] & prots["dev"]
    assert not prots["train"] & prots["test"]
    assert not prots["dev"] & prots["test"]


def test_answer_index_roughly_uniform(tmp_path):
    g = builtin_grammar("errands")
    paths = build_dataset(g, SplitSpec(2000, 0, 0, seed=13), tmp_path)
    answers = [i.answer_index for i in read_instances(paths["train"])]
    counts = np.bincount(answers, minlength=5)
    # binomial null: mean 400, sigma = sqrt(n p (1-p)) ~ 17.9
    sigma = np.sqrt(2000 * 0.2 * 0.8)
    assert np.all(np.abs(counts - 400) <= 5 * sigma)


def test_split_spec_rejects_negative_counts():
    with pytest.raises(SchemaError):
        SplitSpec(-5, 0, 0)


# --- grammar files ---------------------------------------------------------------

def test_grammar_json_round_trip(tmp_path):
    g = builtin_grammar("length-bias")
    path = tmp_path / "g.json"
    save_grammar(g, path)
    back = load_grammar(path)
    assert back == g


def test_load_grammar_builtin_and_missing(tmp_path):
    assert load_grammar("builtin:errands") == builtin_grammar("errands")
    with pytest.raises(SchemaError):
        load_grammar("builtin:nope")
    with pytest.raises(SchemaError):
        load_grammar(tmp_path / "absent.json")


def test_load_grammar_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{broken")
    with pytest.raises(SchemaError):
        load_grammar(path)


def test_grammar_validates_branch_weights():
    data = grammar_to_dict(builtin_grammar("length-bias"))
    data["branches"]["voyage"]["8"][0]["weight"] = 0.9
    with pytest.raises(SchemaError):
        grammar_from_dict(data)


def test_grammar_validates_pool_refs():
    data = grammar_to_dict(builtin_grammar("errands"))
    data["schemas"][0]["events"][0][1] = "$nonexistent"
    with pytest.raises(SchemaError):
        grammar_from_dict(data)


# --- length-bias benchmark ----------------------------------------------------------

def test_length_bias_test_split_shape(tmp_path):
    paths = build_length_bias_dataset(SplitSpec(20, 5, 12, seed=9), tmp_path)
    test = read_instances(paths["test"])
    assert len(test) == 12
    for inst in test:
        answer = inst.answer
        assert answer.object is not None  # long form
        for j, cand in enumerate(inst.candidates):
            if j != inst.answer_index:
                assert cand.object is None and cand.indirect_object is None


def test_length_bias_deterministic(tmp_path):
    a = build_length_bias_dataset(SplitSpec(15, 5, 5, seed=2), tmp_path / "a")
    b = build_length_bias_dataset(SplitSpec(15, 5, 5, seed=2), tmp_path / "b")
    for split in a:
        assert a[split].read_bytes() == b[split].read_bytes()
