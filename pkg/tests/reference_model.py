"""Independent re-implementation of the sequence model's forward pass.

Written as plain per-position / per-head loops over 1-D vector math, with
none of the package's graph machinery, so it can serve as an oracle for
the packaged forward pass and candidate scores.  Keep this file boring:
its value is that it shares no code with scriptseq.model.
"""

import math

import numpy as np

LN_EPS = 1e-5


def _layer_norm(x, g, b):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    inv = 1.0 / math.sqrt(var + LN_EPS)
    return np.array([(xi - mu) * inv * gi + bi for xi, gi, bi in zip(x, g, b)])


def _gelu(v):
    c = math.sqrt(2.0 / math.pi)
    return np.array(
        [0.5 * x * (1.0 + math.tanh(c * (x + 0.044715 * x**3))) for x in v]
    )


def _softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    z = sum(e)
    return [x / z for x in e]


def _attention(t, prefix, queries, keys_values, n_heads, causal):
    d = len(queries[0])
    dh = d // n_heads
    q = [np.dot(x, t[f"{prefix}.wq"]) + t[f"{prefix}.bq"] for x in queries]
    k = [np.dot(x, t[f"{prefix}.wk"]) + t[f"{prefix}.bk"] for x in keys_values]
    v = [np.dot(x, t[f"{prefix}.wv"]) + t[f"{prefix}.bv"] for x in keys_values]
    out = []
    for i in range(len(queries)):
        merged = np.zeros(d)
        for h in range(n_heads):
            lo, hi = h * dh, (h + 1) * dh
            limit = i + 1 if causal else len(keys_values)
            scores = [
                float(np.dot(q[i][lo:hi], k[j][lo:hi])) / math.sqrt(dh)
                for j in range(limit)
            ]
            weights = _softmax(scores)
            ctx = np.zeros(dh)
            for j, w in enumerate(weights):
                ctx += w * v[j][lo:hi]
            merged[lo:hi] = ctx
        out.append(np.dot(merged, t[f"{prefix}.wo"]) + t[f"{prefix}.bo"])
    return out


def _ffn(t, prefix, x):
    h = _gelu(np.dot(x, t[f"{prefix}.w1"]) + t[f"{prefix}.b1"])
    return np.dot(h, t[f"{prefix}.w2"]) + t[f"{prefix}.b2"]


def encode(params, source_ids):
    t, cfg = params.tensors, params.config
    xs = [t["tok_emb"][i] + t["pos_emb"][p] for p, i in enumerate(source_ids)]
    for layer in range(cfg.n_enc_layers):
        p = f"enc{layer}"
        normed = [_layer_norm(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"]) for x in xs]
        attn = _attention(t, f"{p}.attn", normed, normed, cfg.n_heads, causal=False)
        xs = [x + a for x, a in zip(xs, attn)]
        normed = [_layer_norm(x, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"]) for x in xs]
        xs = [x + _ffn(t, f"{p}.ffn", n) for x, n in zip(xs, normed)]
    return [_layer_norm(x, t["enc_ln.g"], t["enc_ln.b"]) for x in xs]


def decode_logprob_rows(params, enc_states, target_ids):
    """Rows k = log-distribution of target position k+1, like the package."""
    t, cfg = params.tensors, params.config
    inputs = target_ids[:-1]
    xs = [t["tok_emb"][i] + t["pos_emb"][p] for p, i in enumerate(inputs)]
    for layer in range(cfg.n_dec_layers):
        p = f"dec{layer}"
        normed = [_layer_norm(x, t[f"{p}.ln1.g"], t[f"{p}.ln1.b"]) for x in xs]
        attn = _attention(t, f"{p}.self", normed, normed, cfg.n_heads, causal=True)
        xs = [x + a for x, a in zip(xs, attn)]
        normed = [_layer_norm(x, t[f"{p}.ln2.g"], t[f"{p}.ln2.b"]) for x in xs]
        cross = _attention(t, f"{p}.cross", normed, enc_states, cfg.n_heads, causal=False)
        xs = [x + c for x, c in zip(xs, cross)]
        normed = [_layer_norm(x, t[f"{p}.ln3.g"], t[f"{p}.ln3.b"]) for x in xs]
        xs = [x + _ffn(t, f"{p}.ffn", n) for x, n in zip(xs, normed)]
    rows = []
    for x in xs:
        h = _layer_norm(x, t["dec_ln.g"], t["dec_ln.b"])
        logits = [float(np.dot(h, t["tok_emb"][v])) for v in range(cfg.vocab_size)]
        m = max(logits)
        logz = m + math.log(sum(math.exp(l - m) for l in logits))
        rows.append(np.array([l - logz for l in logits]))
    return rows


def candidate_score(params, vocab, script, candidate, scoring="mean", norm="paper"):
    """Mean (or sum) of target-token log-probs, computed the slow way."""
    from scriptseq.verbalizer import MASK, verbalize_sequence

    source = vocab.encode(verbalize_sequence(list(script.events) + [MASK]))
    target = vocab.encode(verbalize_sequence([candidate]))
    rows = decode_logprob_rows(params, encode(params, source), target)
    total = 0.0
    for k, row in enumerate(rows):
        total += row[target[k + 1]]
    if scoring == "sum":
        return total
    n = len(target)
    return total / (n if norm == "paper" else n - 1)
