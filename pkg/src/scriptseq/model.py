"""Small trainable encoder-decoder language model.

Pre-norm transformer with learned positional embeddings and a tied
input/output embedding, built on the local autodiff engine.  The model
exposes teacher-forced per-position log-probabilities: row k of the
output matrix is the log-distribution of target token k+1 given the
source and target tokens 0..k, so the BOS at position 0 is never scored.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import (
    ConfigError,
    CorruptCheckpoint,
    HeadMissing,
    NonFiniteLoss,
    SequenceTooLong,
)

__all__ = [
    "ModelConfig",
    "ModelParams",
    "init_params",
    "forward_logprobs",
    "batched_logprobs",
    "encode_states",
    "decode_logprobs",
    "gather_target_logprobs",
    "grad",
    "classifier_forward",
    "add_classifier_head",
    "encoder_pooled",
    "greedy_decode",
    "pad_batch",
    "save_checkpoint",
    "load_checkpoint",
]

NEG_INF = -1e9
LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 128
    max_len: int = 160
    dropout: float = 0.1
    seed: int = 0
    classifier_classes: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.vocab_size < 7:
            raise ConfigError("vocab_size must cover the six specials plus content")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class ModelParams:
    """Named parameter arrays plus the config that fixes their shapes."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def as_graph(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.tensors.items()}

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def _attn_names(prefix: str) -> list[tuple[str, str]]:
    return [(f"{prefix}.w{p}", f"{prefix}.b{p}") for p in ("q", "k", "v", "o")]


def init_params(
    config: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32
) -> ModelParams:
    """Deterministic initialization: N(0, 0.02) weights, zero biases, unit norms."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(config.seed))
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    tensors: dict[str, np.ndarray] = {}

    def normal(name: str, shape: tuple[int, ...]) -> None:
        tensors[name] = rng.normal(0.0, INIT_STD, size=shape).astype(dtype)

    def zeros(name: str, shape: tuple[int, ...]) -> None:
        tensors[name] = np.zeros(shape, dtype=dtype)

    def ones(name: str, shape: tuple[int, ...]) -> None:
        tensors[name] = np.ones(shape, dtype=dtype)

    def norm_block(name: str) -> None:
        ones(f"{name}.g", (d,))
        zeros(f"{name}.b", (d,))

    def attn_block(name: str) -> None:
        for w, b in _attn_names(name):
            normal(w, (d, d))
            zeros(b, (d,))

    def ffn_block(name: str) -> None:
        normal(f"{name}.w1", (d, f))
        zeros(f"{name}.b1", (f,))
        normal(f"{name}.w2", (f, d))
        zeros(f"{name}.b2", (d,))

    normal("tok_emb", (v, d))
    normal("pos_emb", (config.max_len, d))
    for i in range(config.n_enc_layers):
        norm_block(f"enc{i}.ln1")
        attn_block(f"enc{i}.attn")
        norm_block(f"enc{i}.ln2")
        ffn_block(f"enc{i}.ffn")
    norm_block("enc_ln")
    for i in range(config.n_dec_layers):
        norm_block(f"dec{i}.ln1")
        attn_block(f"dec{i}.self")
        norm_block(f"dec{i}.ln2")
        attn_block(f"dec{i}.cross")
        norm_block(f"dec{i}.ln3")
        ffn_block(f"dec{i}.ffn")
    norm_block("dec_ln")
    if config.classifier_classes:
        normal("cls.w", (config.classifier_classes, d))
        zeros("cls.b", (config.classifier_classes,))
    return ModelParams(config, tensors)


# --- forward pass -----------------------------------------------------------

def _layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (var + LN_EPS).pow(-0.5) * g + b


def _dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * Tensor(keep)


def _attention(
    t: dict[str, Tensor],
    prefix: str,
    q_in: Tensor,
    kv_in: Tensor,
    n_heads: int,
    mask: np.ndarray | None,
    rate: float,
    train: bool,
    rng,
) -> Tensor:
    B, Tq, D = q_in.shape
    S = kv_in.shape[1]
    Dh = D // n_heads
    q = (q_in @ t[f"{prefix}.wq"] + t[f"{prefix}.bq"]).reshape(B, Tq, n_heads, Dh).transpose(0, 2, 1, 3)
    k = (kv_in @ t[f"{prefix}.wk"] + t[f"{prefix}.bk"]).reshape(B, S, n_heads, Dh).transpose(0, 2, 1, 3)
    v = (kv_in @ t[f"{prefix}.wv"] + t[f"{prefix}.bv"]).reshape(B, S, n_heads, Dh).transpose(0, 2, 1, 3)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(Dh))
    if mask is not None:
        scores = scores + Tensor(mask)
    attn = scores.softmax(axis=-1)
    attn = _dropout(attn, rate, train, rng)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
    return ctx @ t[f"{prefix}.wo"] + t[f"{prefix}.bo"]


def _ffn(t: dict[str, Tensor], prefix: str, x: Tensor, rate: float, train: bool, rng) -> Tensor:
    h = (x @ t[f"{prefix}.w1"] + t[f"{prefix}.b1"]).gelu()
    h = _dropout(h, rate, train, rng)
    return h @ t[f"{prefix}.w2"] + t[f"{prefix}.b2"]


def _key_pad_mask(lengths: np.ndarray, size: int, dtype) -> np.ndarray | None:
    """(B, 1, 1, size) additive mask hiding key positions >= length."""
    if np.all(lengths == size):
        return None
    cols = np.arange(size)
    mask = np.where(cols[None, :] < lengths[:, None], 0.0, NEG_INF).astype(dtype)
    return mask[:, None, None, :]


def _embed(t: dict[str, Tensor], cfg: ModelConfig, ids: np.ndarray, train, rng) -> Tensor:
    n = ids.shape[1]
    if n > cfg.max_len:
        raise SequenceTooLong(f"sequence length {n} exceeds max_len {cfg.max_len}")
    x = t["tok_emb"][ids] + t["pos_emb"][:n]
    return _dropout(x, cfg.dropout, train, rng)


def _encoder_stack(
    t: dict[str, Tensor],
    cfg: ModelConfig,
    src: np.ndarray,
    src_lens: np.ndarray,
    train: bool,
    rng,
) -> Tensor:
    dtype = t["tok_emb"].dtype
    x = _embed(t, cfg, src, train, rng)
    mask = _key_pad_mask(src_lens, src.shape[1], dtype)
    for i in range(cfg.n_enc_layers):
        p = f"enc{i}"
        h = _layer_norm(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"])
        x = x + _dropout(
            _attention(t, f"{p}.attn", h, h, cfg.n_heads, mask, cfg.dropout, train, rng),
            cfg.dropout, train, rng,
        )
        h = _layer_norm(x, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
        x = x + _dropout(_ffn(t, f"{p}.ffn", h, cfg.dropout, train, rng), cfg.dropout, train, rng)
    return _layer_norm(x, t["enc_ln.g"], t["enc_ln.b"])


def _decoder_stack(
    t: dict[str, Tensor],
    cfg: ModelConfig,
    enc_out: Tensor,
    src_lens: np.ndarray,
    tgt_in: np.ndarray,
    train: bool,
    rng,
) -> Tensor:
    dtype = t["tok_emb"].dtype
    B, n = tgt_in.shape
    x = _embed(t, cfg, tgt_in, train, rng)
    causal = np.triu(np.full((n, n), NEG_INF, dtype=dtype), k=1)[None, None]
    cross_mask = _key_pad_mask(src_lens, enc_out.shape[1], dtype)
    for i in range(cfg.n_dec_layers):
        p = f"dec{i}"
        h = _layer_norm(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"])
        x = x + _dropout(
            _attention(t, f"{p}.self", h, h, cfg.n_heads, causal, cfg.dropout, train, rng),
            cfg.dropout, train, rng,
        )
        h = _layer_norm(x, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"])
        x = x + _dropout(
            _attention(t, f"{p}.cross", h, enc_out, cfg.n_heads, cross_mask, cfg.dropout, train, rng),
            cfg.dropout, train, rng,
        )
        h = _layer_norm(x, t[f"{p}.ln3.g"], t[f"{p}.ln3.b"])
        x = x + _dropout(_ffn(t, f"{p}.ffn", h, cfg.dropout, train, rng), cfg.dropout, train, rng)
    return _layer_norm(x, t["dec_ln.g"], t["dec_ln.b"])


def encode_states(
    t: dict[str, Tensor],
    cfg: ModelConfig,
    src: np.ndarray,
    src_lens: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Final encoder states (B, S, d_model) for a padded source batch."""
    return _encoder_stack(t, cfg, src, src_lens, train, rng)


def decode_logprobs(
    t: dict[str, Tensor],
    cfg: ModelConfig,
    enc_out: Tensor,
    src_lens: np.ndarray,
    tgt: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced log-probabilities against precomputed encoder states.

    tgt: (B, N) ids starting with BOS.  Returns (B, N-1, V); row (b, k) is
    the log-distribution of tgt[b, k+1] given the source and tgt[b, :k+1].
    Rows at padded positions are garbage and must be masked by the caller.
    """
    if tgt.shape[1] > cfg.max_len + 1:
        raise SequenceTooLong(
            f"target length {tgt.shape[1]} exceeds max_len {cfg.max_len}"
        )
    dec_out = _decoder_stack(t, cfg, enc_out, src_lens, tgt[:, :-1], train, rng)
    logits = dec_out @ t["tok_emb"].swapaxes(0, 1)
    return logits.log_softmax(axis=-1)


def batched_logprobs(
    t: dict[str, Tensor],
    cfg: ModelConfig,
    src: np.ndarray,
    src_lens: np.ndarray,
    tgt: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """encode_states followed by decode_logprobs, one source per target."""
    enc_out = encode_states(t, cfg, src, src_lens, train, rng)
    return decode_logprobs(t, cfg, enc_out, src_lens, tgt, train, rng)


def pad_batch(
    sequences: Sequence[Sequence[int]], pad_id: int
) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences into an (B, L) int array plus lengths."""
    lens = np.array([len(s) for s in sequences], dtype=np.int64)
    out = np.full((len(sequences), int(lens.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = s
    return out, lens


def forward_logprobs(
    params: ModelParams, source_ids: Sequence[int], target_ids: Sequence[int]
) -> np.ndarray:
    """Log-probability matrix for one (source, target) pair, dropout off.

    Returns (N-1, V) where N = len(target_ids); row k is the distribution
    of target position k+1.  A BOS-only target yields a (0, V) matrix.
    """
    cfg = params.config
    source_ids = list(source_ids)
    target_ids = list(target_ids)
    if len(source_ids) > cfg.max_len:
        raise SequenceTooLong(f"source length {len(source_ids)} exceeds max_len {cfg.max_len}")
    if len(target_ids) > cfg.max_len:
        raise SequenceTooLong(f"target length {len(target_ids)} exceeds max_len {cfg.max_len}")
    if not target_ids or target_ids[0] != 0:
        raise ValueError("target must begin with the BOS token (id 0)")
    if len(target_ids) == 1:
        return np.zeros((0, cfg.vocab_size), dtype=params.dtype)
    with no_grad():
        t = params.as_graph(requires_grad=False)
        src = np.asarray([source_ids], dtype=np.int64)
        tgt = np.asarray([target_ids], dtype=np.int64)
        out = batched_logprobs(t, cfg, src, np.array([src.shape[1]]), tgt, train=False)
    return out.data[0]


def gather_target_logprobs(L: np.ndarray, target_ids: Sequence[int]) -> np.ndarray:
    """Per-position log-probabilities of the realized target tokens.

    L is the (N-1, V) matrix from forward_logprobs; the result has one
    entry per scored position (everything after BOS).
    """
    target_ids = list(target_ids)
    n = len(target_ids)
    if n <= 1:
        return np.zeros((0,), dtype=L.dtype if hasattr(L, "dtype") else np.float64)
    L = np.asarray(L)
    if L.shape[0] != n - 1:
        raise ValueError(f"expected {n - 1} rows, got {L.shape[0]}")
    return L[np.arange(n - 1), np.asarray(target_ids[1:], dtype=np.int64)]


def grad(
    loss_builder: Callable[[dict[str, Tensor]], Tensor],
    params: ModelParams,
    batch=None,
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of a scalar loss over all parameters.

    loss_builder is called with the parameter tensors (and the batch, if
    given) and must return a scalar Tensor.  Parameters the loss does not
    touch get exact zero gradients.
    """
    t = params.as_graph(requires_grad=True)
    loss = loss_builder(t, batch) if batch is not None else loss_builder(t)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLoss(f"loss is {loss.data}")
    if loss.requires_grad:
        loss.backward()
    return {
        name: (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data))
        for name, tensor in t.items()
    }


def encoder_pooled(
    t: dict[str, Tensor],
    cfg: ModelConfig,
    src: np.ndarray,
    src_lens: np.ndarray,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Final encoder state at the BOS position, (B, d_model)."""
    return _encoder_stack(t, cfg, src, src_lens, train, rng)[:, 0]


def greedy_decode(
    params: ModelParams,
    source_ids: Sequence[int],
    *,
    bos_id: int = 0,
    eos_id: int = 1,
    max_tokens: int | None = None,
) -> list[int]:
    """Debugging decoder: argmax continuation until EOS or max_tokens.

    Scoring never uses this (candidate likelihoods are teacher-forced);
    it exists to eyeball what the infilling model would regenerate.
    """
    cfg = params.config
    limit = min(max_tokens or cfg.max_len, cfg.max_len)
    out = [bos_id]
    with no_grad():
        t = params.as_graph(requires_grad=False)
        src = np.asarray([list(source_ids)], dtype=np.int64)
        src_lens = np.array([src.shape[1]])
        enc = encode_states(t, cfg, src, src_lens)
        while len(out) < limit:
            tgt = np.asarray([out + [bos_id]], dtype=np.int64)  # extra slot trimmed
            lp = decode_logprobs(t, cfg, enc, src_lens, tgt)
            nxt = int(np.argmax(lp.data[0, len(out) - 1]))
            out.append(nxt)
            if nxt == eos_id:
                break
    return out


def add_classifier_head(
    params: ModelParams, n_classes: int, rng: np.random.Generator | None = None
) -> ModelParams:
    """Copy of params with a freshly initialized (n_classes, d_model) head."""
    cfg = params.config
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    out = params.copy()
    out.config = ModelConfig(**{**asdict(cfg), "classifier_classes": n_classes})
    out.tensors["cls.w"] = rng.normal(0.0, INIT_STD, size=(n_classes, cfg.d_model)).astype(params.dtype)
    out.tensors["cls.b"] = np.zeros(n_classes, dtype=params.dtype)
    return out


def classifier_forward(params: ModelParams, source_ids: Sequence[int]) -> np.ndarray:
    """Classifier-head logits for one source: head @ pooled BOS state."""
    if "cls.w" not in params.tensors:
        raise HeadMissing("model was built without a classifier head")
    cfg = params.config
    with no_grad():
        t = params.as_graph(requires_grad=False)
        src = np.asarray([list(source_ids)], dtype=np.int64)
        pooled = encoder_pooled(t, cfg, src, np.array([src.shape[1]]))
        logits = pooled @ t["cls.w"].swapaxes(0, 1) + t["cls.b"]
    return logits.data[0]


# --- checkpoint container -----------------------------------------------------
#
# Layout: magic, u32 header length, header JSON (config + adam step count),
# u32 tensor count, then per tensor: u16 name length, name, u8 dtype-string
# length, numpy dtype string, u8 ndim, u32 dims, raw little-endian payload.
# A crc32 of everything preceding closes the file.

MAGIC = b"SSEQCKP1"


def _optimizer_tensors(optimizer_state: dict | None) -> dict[str, np.ndarray]:
    if not optimizer_state:
        return {}
    out = {}
    for kind in ("m", "v"):
        for name, arr in optimizer_state[kind].items():
            out[f"adam.{kind}.{name}"] = arr
    return out


def save_checkpoint(
    params: ModelParams, optimizer_state: dict | None, path: str | Path
) -> None:
    """Write params (and optionally Adam state) as a checksummed container."""
    header = {
        "config": asdict(params.config),
        "adam_t": None if optimizer_state is None else int(optimizer_state["t"]),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = dict(params.tensors)
    tensors.update(_optimizer_tensors(optimizer_state))

    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", len(header_bytes))
    buf += header_bytes
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype_str = arr.dtype.newbyteorder("<").str
        name_b = name.encode("utf-8")
        buf += struct.pack("<H", len(name_b)) + name_b
        buf += struct.pack("<B", len(dtype_str)) + dtype_str.encode("ascii")
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype(dtype_str, copy=False).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CorruptCheckpoint(f"truncated while reading {what}", self.offset)
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict | None]:
    """Inverse of save_checkpoint; bit-exact round trip."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8:
        raise CorruptCheckpoint("file shorter than the fixed framing", 0)
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CorruptCheckpoint(
            f"checksum mismatch: stored {stored_crc:#x}, computed {actual_crc:#x}",
            len(blob) - 4,
        )
    r = _Reader(blob[:-4])
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CorruptCheckpoint("bad magic bytes", 0)
    header = json.loads(r.take(r.u32("header length"), "header").decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    n_tensors = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_len = struct.unpack("<H", r.take(2, "name length"))[0]
        name = r.take(name_len, "name").decode("utf-8")
        dlen = struct.unpack("<B", r.take(1, "dtype length"))[0]
        dtype = np.dtype(r.take(dlen, "dtype").decode("ascii"))
        ndim = struct.unpack("<B", r.take(1, "ndim"))[0]
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        payload = r.take(int(np.prod(shape, dtype=np.int64)) * dtype.itemsize, f"tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if r.offset != len(r.blob):
        raise CorruptCheckpoint("trailing bytes after the last tensor", r.offset)

    param_tensors = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    params = ModelParams(cfg, param_tensors)
    optimizer_state: dict | None = None
    if header.get("adam_t") is not None:
        optimizer_state = {
            "t": header["adam_t"],
            "m": {
                k[len("adam.m.") :]: v for k, v in tensors.items() if k.startswith("adam.m.")
            },
            "v": {
                k[len("adam.v.") :]: v for k, v in tensors.items() if k.startswith("adam.v.")
            },
        }
    return params, optimizer_state
