import numpy as np
import pytest
import scipy.linalg

from fbgrape.graddiff import tape as ad
from conftest import complex_fd


def _grad(build, x):
    tp = ad.Tape()
    leaf = tp.leaf(x)
    out = build(leaf)
    tp.backward(out)
    return leaf.grad


def _val(build, x):
    return float(ad.value(build(x)))


def _rand_c(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_matmul_chain_matches_fd(rng):
    b = _rand_c(rng, 3, 3)
    w = _rand_c(rng, 3, 3)
    f = lambda a: ad.real(ad.sum_(ad.conj(w) * ad.matmul(ad.matmul(a, b), ad.dag(a))))
    a = _rand_c(rng, 3, 3)
    np.testing.assert_allclose(_grad(f, a), complex_fd(lambda x: _val(f, x), a), atol=1e-7)


def test_elementwise_ops_match_fd(rng):
    f = lambda x: ad.real(ad.sum_(ad.exp(0.3 * x) * ad.cos(x) / (2.0 + ad.sin(x) * ad.sin(x)) + ad.tanh(x)))
    x = rng.normal(size=5)
    np.testing.assert_allclose(_grad(f, x), complex_fd(lambda v: _val(f, v), x), atol=1e-8)


def test_log_sqrt_sigmoid_relu(rng):
    x = rng.uniform(0.5, 2.0, size=4)
    f = lambda v: ad.sum_(ad.log(v) + ad.sqrt(v) + ad.sigmoid(v) + ad.relu(v - 1.0))
    np.testing.assert_allclose(_grad(f, x), complex_fd(lambda v: _val(f, v), x), atol=1e-7)


def test_getitem_cumsum_concat_scatter(rng):
    x = rng.normal(size=(2, 5))
    idx = (np.array([0, 1, 1]), np.array([4, 0, 2]))

    def f(v):
        c = ad.cumsum(ad.concatenate([v, v * 2.0], axis=-1), axis=-1)
        s = ad.scatter(ad.getitem(v, idx), (np.array([0, 1, 2]), np.array([2, 1, 0])), (3, 3))
        return ad.sum_(c * c) + ad.real(ad.trace(ad.matmul(s, s)))

    np.testing.assert_allclose(_grad(f, x), complex_fd(lambda v: _val(f, v), x), atol=1e-6)


def test_expm_herm_value_and_gradient(rng):
    a = _rand_c(rng, 4, 4)
    h = a + a.conj().T
    np.testing.assert_allclose(ad.expm_herm(h), scipy.linalg.expm(-1j * h), atol=1e-12)
    w = _rand_c(rng, 4, 4)
    f = lambda m: ad.real(ad.sum_(ad.conj(w) * ad.expm_herm(m)))
    # differentiate along Hermitian directions only
    g = _grad(f, h)
    for _ in range(3):
        e = _rand_c(rng, 4, 4)
        e = e + e.conj().T
        d = (_val(f, h + 1e-6 * e) - _val(f, h - 1e-6 * e)) / 2e-6
        assert abs(np.real(np.sum(np.conj(g) * e)) - d) < 1e-7


def test_sqrtm_psd_matches_scipy(rng):
    a = _rand_c(rng, 3, 3)
    p = a @ a.conj().T + 0.1 * np.eye(3)
    np.testing.assert_allclose(ad.sqrtm_psd(p), scipy.linalg.sqrtm(p), atol=1e-10)


def test_nonscalar_output_needs_seed():
    tp = ad.Tape()
    x = tp.leaf(np.ones(3))
    with pytest.raises(ad.TapeError):
        tp.backward(x * 2.0)


def test_nonfinite_adjoint_is_reported():
    tp = ad.Tape()
    x = tp.leaf(np.array([0.0, 1.0]))
    with pytest.raises(ad.TapeError, match="non-finite"):
        with np.errstate(divide="ignore", invalid="ignore"):
            tp.backward(ad.sum_(ad.log(x)))


def test_append_order_is_topological():
    tp = ad.Tape()
    x = tp.leaf(np.ones(2))
    y = x * 3.0
    z = ad.sum_(y + x)
    idx = [n.index for n in tp.nodes]
    assert idx == sorted(idx)
    for n in tp.nodes:
        assert all(p is None or p.index < n.index for p in n.parents)
    assert z.index == len(tp.nodes) - 1


def test_mixing_tapes_is_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.leaf(np.ones(1))
    with pytest.raises(ad.TapeError):
        t2.backward(ad.sum_(a))


def test_broadcast_gradient_is_reduced(rng):
    b = rng.normal(size=(4, 3))
    f = lambda v: ad.sum_((v + b) * (v + b))
    x = rng.normal(size=3)
    np.testing.assert_allclose(_grad(f, x), 2 * (x + b).sum(axis=0), atol=1e-12)
