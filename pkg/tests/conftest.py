import numpy as np
import pytest

from scriptseq.corpus import SplitSpec, build_dataset, builtin_grammar
from scriptseq.events import Event, MCNCInstance, Script, read_instances
from scriptseq.model import ModelConfig, init_params
from scriptseq.verbalizer import build_vocab


def make_instance(tag: str = "a", m: int = 5) -> MCNCInstance:
    """Small hand-built instance; `tag` varies the surface tokens."""
    prot = f"prot_{tag}"
    events = tuple(
        Event(prot, f"verb{i}_{tag}", f"obj{i}_{tag}" if i % 2 == 0 else None, None)
        for i in range(8)
    )
    positive = Event(prot, f"verb8_{tag}", f"obj8_{tag}", None)
    negatives = tuple(Event(prot, f"wrong{j}_{tag}", f"obj{j}_{tag}", None) for j in range(m - 1))
    return MCNCInstance(Script(events, prot), (positive,) + negatives, 0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """40/10/10 instances from the deterministic built-in grammar."""
    out = tmp_path_factory.mktemp("tiny-data")
    paths = build_dataset(builtin_grammar("errands"), SplitSpec(40, 10, 10, seed=7), out)
    return {split: read_instances(p) for split, p in paths.items()}


@pytest.fixture(scope="session")
def tiny_vocab(tiny_dataset):
    return build_vocab(tiny_dataset["train"])


@pytest.fixture(scope="session")
def tiny_model(tiny_vocab):
    """1-layer, d_model=8 model in float64: small enough for oracles."""
    cfg = ModelConfig(
        vocab_size=len(tiny_vocab),
        d_model=8,
        n_heads=2,
        n_enc_layers=1,
        n_dec_layers=1,
        d_ffn=12,
        max_len=64,
        dropout=0.0,
        seed=123,
    )
    return init_params(cfg, dtype=np.float64)
