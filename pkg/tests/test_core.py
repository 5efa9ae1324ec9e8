import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iccdit import core
from iccdit.core import Rng, finite_diff_grad, gelu, layer_norm, layer_norm_backward, mlp_forward


def _splitmix_ref(seed, n):
    # scalar reference of the documented SplitMix64 recurrence
    mask = (1 << 64) - 1
    out, state = [], seed & mask
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def test_rng_matches_scalar_splitmix():
    assert [int(x) for x in Rng(42).next_u64(8)] == _splitmix_ref(42, 8)


def test_rng_stream_continues_across_calls():
    a = Rng(7)
    first = list(a.next_u64(3)) + list(a.next_u64(2))
    assert [int(x) for x in first] == _splitmix_ref(7, 5)


def test_rng_same_seed_same_draws_different_seed_differs():
    assert np.array_equal(Rng(3).normal((4, 5)), Rng(3).normal((4, 5)))
    assert not np.array_equal(Rng(3).normal((4, 5)), Rng(4).normal((4, 5)))


def test_rng_distributions():
    r = Rng(0)
    u = r.uniform(20000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01
    z = r.normal(20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03
    k = r.integers(2, 5, 1000)
    assert set(np.unique(k)) == {2, 3, 4}


def test_check_finite():
    core.check_finite(np.ones(3))
    with pytest.raises(FloatingPointError):
        core.check_finite(np.array([1.0, np.nan]))


def test_gelu_tanh_closed_form():
    for x in (-3.0, -0.5, 0.0, 1.0, 2.0):
        ref = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        assert abs(float(gelu(np.array(x))) - ref) < 1e-12


def test_gelu_grad_matches_fd():
    x = np.linspace(-4, 4, 41)
    fd = finite_diff_grad(lambda v: float(gelu(v).sum()), x, 1e-5)
    assert np.max(np.abs(core.gelu_grad(x) - fd)) < 1e-7


def test_sigmoid_stable():
    s = core.sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert np.all(np.isfinite(s)) and s[1] == 0.5 and s[0] < 1e-300 + 1e-12 and s[2] == 1.0


def test_mlp_zero_weights_zero_output():
    x = Rng(0).normal((3, 4))
    out = mlp_forward(x, np.zeros((4, 5)), np.zeros(5), np.zeros((5, 2)), np.zeros(2))
    assert np.array_equal(out, np.zeros((3, 2)))


def test_mlp_identity_like_closed_form():
    w2 = np.array([[1.7]])
    out = mlp_forward(np.array([[2.0]]), np.eye(1), np.zeros(1), w2, np.zeros(1))
    assert out[0, 0] == pytest.approx(float(gelu(np.array(2.0))) * 1.7, abs=1e-12)


def test_mlp_shape_mismatch():
    with pytest.raises(ValueError):
        mlp_forward(np.ones((2, 3)), np.ones((4, 5)), np.zeros(5), np.ones((5, 1)), np.zeros(1))


def test_mlp_backward_matches_fd():
    r = Rng(5)
    x = r.normal((4, 3))
    w1, b1, w2, b2 = r.normal((3, 6)), r.normal(6), r.normal((6, 2)), r.normal(2)
    g = r.normal((4, 2))

    def loss(x_, w1_, b1_, w2_, b2_):
        return float((mlp_forward(x_, w1_, b1_, w2_, b2_) * g).sum())

    _, cache = mlp_forward(x, w1, b1, w2, b2, return_cache=True)
    grads = core.mlp_backward(g, cache, w1, w2)
    args = [x, w1, b1, w2, b2]
    for i, an in enumerate(grads):
        def f(v, i=i):
            a = list(args)
            a[i] = v
            return loss(*a)
        fd = finite_diff_grad(f, args[i], 1e-4)
        rel = np.max(np.abs(an - fd)) / max(1e-8, np.max(np.abs(fd)))
        assert rel < 1e-3


def test_layer_norm_stats_and_backward():
    r = Rng(9)
    x = r.normal((5, 8)) * 3 + 1
    gain = r.normal(8)
    y, xh, inv = layer_norm(x, np.ones(8))
    assert np.allclose(y.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(y.var(axis=1), 1, atol=1e-4)
    dy = r.normal((5, 8))
    _, xh, inv = layer_norm(x, gain)
    dx, dg = layer_norm_backward(dy, xh, inv, gain)
    fdx = finite_diff_grad(lambda v: float((layer_norm(v, gain)[0] * dy).sum()), x, 1e-5)
    fdg = finite_diff_grad(lambda v: float((layer_norm(x, v)[0] * dy).sum()), gain, 1e-5)
    assert np.max(np.abs(dx - fdx)) < 1e-6
    assert np.max(np.abs(dg - fdg)) < 1e-6


def test_finite_diff_sum_is_ones():
    x = Rng(1).normal((3, 4))
    assert np.allclose(finite_diff_grad(lambda v: float(v.sum()), x), 1.0, atol=1e-9)


def test_finite_diff_half_norm():
    g = finite_diff_grad(lambda v: 0.5 * float((v**2).sum()), np.array([3.0, 4.0]))
    assert np.allclose(g, [3.0, 4.0], atol=1e-5)


def test_finite_diff_does_not_mutate_input():
    x = np.array([1.0, 2.0])
    finite_diff_grad(lambda v: float((v**3).sum()), x)
    assert np.array_equal(x, [1.0, 2.0])


def test_finite_diff_three_layer_net():
    r = Rng(11)
    x = r.normal((2, 3))
    ws = [r.normal((3, 4)), r.normal((4, 4)), r.normal((4, 1))]

    def forward(w0):
        h1 = np.tanh(x @ w0)
        h2 = np.tanh(h1 @ ws[1])
        return float((h2 @ ws[2]).sum()), (h1, h2)

    _, (h1, h2) = forward(ws[0])
    d2 = np.ones((2, 1)) @ ws[2].T * (1 - h2**2)
    d1 = d2 @ ws[1].T * (1 - h1**2)
    an = x.T @ d1
    fd = finite_diff_grad(lambda w: forward(w)[0], ws[0])
    assert np.max(np.abs(an - fd)) / np.max(np.abs(an)) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63), st.integers(1, 50))
def test_uniform_in_unit_interval(seed, n):
    u = Rng(seed).uniform(n)
    assert np.all((u >= 0) & (u < 1))
