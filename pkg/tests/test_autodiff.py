import numpy as np
import pytest

from scriptseq.autodiff import Tensor, no_grad


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def finite_diff(f, x, h=1e-6):
    """Central-difference gradient of scalar f over array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


OPS = {
    "add": lambda t: (t + 2.0 * t).sum(),
    "sub": lambda t: (t - t * 0.3).sum(),
    "mul_broadcast": lambda t: (t * Tensor(np.arange(1.0, 4.0))).sum(),
    "div": lambda t: (t / (t * t + 1.0)).sum(),
    "pow": lambda t: (t.pow(3)).sum(),
    "exp": lambda t: t.exp().sum(),
    "log": lambda t: (t * t + 1.0).log().sum(),
    "tanh": lambda t: t.tanh().sum(),
    "relu": lambda t: (t - 0.1).relu().sum(),
    "gelu": lambda t: t.gelu().sum(),
    "softmax": lambda t: (t.softmax(axis=-1) * Tensor(np.arange(3.0))).sum(),
    "log_softmax": lambda t: (t.log_softmax(axis=-1) * Tensor(np.arange(3.0))).sum(),
    "reshape": lambda t: (t.reshape(3, 2) @ Tensor(np.ones((2, 1)))).sum(),
    "mean": lambda t: t.mean(axis=-1).sum(),
    "sum_axis": lambda t: (t.sum(axis=0) * Tensor(np.arange(3.0))).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_grads_match_fd(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = rng.normal(0.4, 0.8, size=(2, 3))
    fn = OPS[name]

    def value(arr):
        return float(fn(Tensor(arr)).data)

    t = leaf(x)
    out = fn(t)
    out.backward()
    fd = finite_diff(value, x)
    np.testing.assert_allclose(t.grad, fd, rtol=1e-6, atol=1e-8)


def test_matmul_grads():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))

    ta, tb = leaf(a), leaf(b)
    ((ta @ tb) * Tensor(w)).sum().backward()

    def fa(arr):
        return float(((Tensor(arr) @ Tensor(b)) * Tensor(w)).sum().data)

    def fb(arr):
        return float(((Tensor(a) @ Tensor(arr)) * Tensor(w)).sum().data)

    np.testing.assert_allclose(ta.grad, finite_diff(fa, a), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(tb.grad, finite_diff(fb, b), rtol=1e-6, atol=1e-9)


def test_batched_matmul_with_weight_broadcast():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 3))
    w = rng.normal(size=(3, 3))
    sel = rng.normal(size=(2, 4, 3))

    tx, tw = leaf(x), leaf(w)
    ((tx @ tw) * Tensor(sel)).sum().backward()

    def fx(arr):
        return float(((Tensor(arr) @ Tensor(w)) * Tensor(sel)).sum().data)

    def fw(arr):
        return float(((Tensor(x) @ Tensor(arr)) * Tensor(sel)).sum().data)

    np.testing.assert_allclose(tx.grad, finite_diff(fx, x), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(tw.grad, finite_diff(fw, w), rtol=1e-6, atol=1e-9)


def test_getitem_gather_accumulates():
    x = leaf(np.arange(6.0).reshape(2, 3))
    idx = (np.array([0, 0, 1]), np.array([1, 1, 2]))
    out = x[idx].sum()
    out.backward()
    expected = np.zeros((2, 3))
    expected[0, 1] = 2.0  # picked twice
    expected[1, 2] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_transpose_and_swapaxes():
    rng = np.random.default_rng(2)
    x = leaf(rng.normal(size=(2, 3, 4)))
    sel = rng.normal(size=(3, 4, 2))
    (x.transpose(1, 0, 2).swapaxes(-1, -2) * Tensor(sel)).sum().backward()
    np.testing.assert_allclose(x.grad, sel.transpose(2, 0, 1))


def test_grad_accumulates_over_reuse():
    x = leaf(np.array([2.0]))
    y = x * x + x * 3.0
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [2 * 2.0 + 3.0])


def test_no_grad_blocks_graph():
    x = leaf(np.ones(3))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    with pytest.raises(ValueError):
        y.backward()


def test_detach_stops_gradient():
    x = leaf(np.array([3.0]))
    y = (x.detach() * x).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, [3.0])  # only the non-detached factor


def test_dtype_preserved_float32():
    x = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
    y = ((x * 2.0 + 1.0).exp()).sum()
    assert y.data.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32


def test_softmax_rows_normalize():
    x = Tensor(np.random.default_rng(3).normal(size=(5, 7)) * 10)
    s = x.softmax(axis=-1)
    np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(5), atol=1e-12)
    ls = x.log_softmax(axis=-1)
    np.testing.assert_allclose(np.exp(ls.data).sum(axis=-1), np.ones(5), atol=1e-12)
