import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iccdit import kernels
from iccdit.attention import (AttentionInputs, SequenceLayout, attn_decoupled, attn_dense,
                              attn_icc_full, attn_masked_oracle, equivalence_suite,
                              max_decoupled_error, random_instance)
from iccdit.core import Rng


def _softmax(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _inputs(seed, n_z, n_c, d):
    r = Rng(seed)
    return AttentionInputs(*(r.normal((n, d)) for n in (n_z, n_z, n_z, n_c, n_c, n_c)))


# -- layout


def test_layout_counts_and_split():
    lay = SequenceLayout(3, (("ref", 2), ("traj", 4)))
    assert lay.n_c == 6 and lay.total == 9
    seq = np.arange(9 * 2).reshape(9, 2)
    parts = lay.split(seq)
    assert list(parts) == ["noisy", "ref", "traj"]
    assert np.array_equal(np.concatenate(list(parts.values())), seq)
    assert lay.segment_ids().tolist() == [0, 0, 1, 1, 1, 1]


def test_layout_invalid():
    with pytest.raises(ValueError):
        SequenceLayout(0)
    with pytest.raises(ValueError):
        SequenceLayout(2, (("a", -1),))
    with pytest.raises(ValueError):
        SequenceLayout(2, (("a", 1),)).split(np.zeros((2, 1)))


def test_inputs_validation():
    with pytest.raises(ValueError):
        AttentionInputs(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 3)),
                        np.ones((1, 4)), np.ones((1, 4)), np.ones((1, 4)))
    with pytest.raises(ValueError):
        AttentionInputs(np.ones((2, 3)), np.ones((1, 3)), np.ones((2, 3)),
                        np.ones((1, 3)), np.ones((1, 3)), np.ones((1, 3)))


# -- dense


def test_dense_single_key():
    r = Rng(0)
    v = r.normal((1, 4))
    out = attn_dense(r.normal((3, 4)), r.normal((1, 4)), v)
    assert np.allclose(out, np.repeat(v, 3, axis=0), atol=1e-15)


def test_dense_saturation():
    K = np.eye(4)
    V = Rng(1).normal((4, 4))
    out = attn_dense(1000.0 * K[2:3], K, V)
    assert np.max(np.abs(out - V[2])) < 1e-3


def test_dense_vs_formula():
    r = Rng(2)
    Q, K, V = r.normal((4, 8)), r.normal((3, 8)), r.normal((3, 8))
    ref = _softmax(Q @ K.T / math.sqrt(8)) @ V
    assert np.max(np.abs(attn_dense(Q, K, V) - ref)) < 1e-6


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        attn_dense(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)))


# -- full joint attention


def test_full_without_context():
    inp = _inputs(3, 4, 0, 5)
    oz, oc = attn_icc_full(inp)
    assert oc.shape == (0, 5)
    assert np.max(np.abs(oz - attn_dense(inp.Q_z, inp.K_z, inp.V_z))) < 1e-15


def test_full_identical_values():
    inp = _inputs(4, 3, 4, 5)
    v = Rng(5).normal(5)
    inp.V_z[:] = v
    inp.V_c[:] = v
    oz, oc = attn_icc_full(inp)
    assert np.allclose(oz, v, atol=1e-12) and np.allclose(oc, v, atol=1e-12)


def test_full_vs_block_matrix_oracle():
    inp = _inputs(6, 4, 3, 6)
    sc = 1 / math.sqrt(6)
    S = np.block([[inp.Q_z @ inp.K_z.T, inp.Q_z @ inp.K_c.T],
                  [inp.Q_c @ inp.K_z.T, inp.Q_c @ inp.K_c.T]]) * sc
    O = _softmax(S) @ np.concatenate([inp.V_z, inp.V_c])
    oz, oc = attn_icc_full(inp)
    assert np.max(np.abs(np.concatenate([oz, oc]) - O)) < 1e-6


# -- masked oracle


def test_masked_without_noisy_rows():
    r = Rng(7)
    z = np.zeros((0, 4))
    Qc, Kc, Vc = r.normal((3, 4)), r.normal((3, 4)), r.normal((3, 4))
    inp = AttentionInputs(z, z, z, Qc, Kc, Vc)
    oz, oc = attn_masked_oracle(inp)
    assert oz.shape == (0, 4)
    assert np.max(np.abs(oc - attn_dense(Qc, Kc, Vc))) < 1e-15


def test_masked_without_context():
    inp = _inputs(8, 3, 0, 4)
    oz, _ = attn_masked_oracle(inp)
    assert np.max(np.abs(oz - attn_dense(inp.Q_z, inp.K_z, inp.V_z))) < 1e-15


def test_masked_weights_structure():
    inp = _inputs(9, 5, 4, 6)
    _, _, w = attn_masked_oracle(inp, return_weights=True)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w[5:, :5] == 0.0)


# -- decoupled


def test_decoupled_without_context():
    inp = _inputs(10, 4, 0, 3)
    oz, oc = attn_decoupled(inp)
    assert oc.shape == (0, 3)
    assert np.max(np.abs(oz - attn_dense(inp.Q_z, inp.K_z, inp.V_z))) < 1e-15


def test_decoupled_single_context_token():
    inp = _inputs(11, 4, 1, 3)
    _, oc = attn_decoupled(inp)
    assert np.array_equal(oc, inp.V_c)


def test_decoupled_matches_oracle_small_suite():
    for s in range(100):
        r = Rng(10_000 + s)
        n_z, n_c, d = int(r.integers(1, 9)), int(r.integers(0, 9)), int(r.integers(2, 17))
        assert max_decoupled_error(_inputs(s, n_z, n_c, d)) < 1e-6


@pytest.mark.parametrize("backend", ["python", "compiled"])
def test_equivalence_suite_both_backends(backend):
    if backend == "compiled" and not kernels.compiled_available():
        pytest.skip("compiled extension not built")
    with kernels.use_backend(backend):
        worst, failing = equivalence_suite(range(300))
    assert failing == [] and worst < 1e-6


def test_random_instance_ranges():
    seen = [random_instance(s) for s in range(300)]
    assert min(i.n_z for i in seen) >= 1 and max(i.n_z for i in seen) <= 16
    assert min(i.n_c for i in seen) == 0 and max(i.n_c for i in seen) <= 16
    assert min(i.Q_z.shape[1] for i in seen) >= 2 and max(i.Q_z.shape[1] for i in seen) <= 32


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_context_output_independent_of_noisy(seed):
    inp = _inputs(seed, 3, 4, 5)
    _, oc = attn_decoupled(inp)
    r = Rng(seed + 1)
    pert = AttentionInputs(inp.Q_z + r.normal(inp.Q_z.shape), inp.K_z + r.normal(inp.K_z.shape),
                           inp.V_z + r.normal(inp.V_z.shape), inp.Q_c, inp.K_c, inp.V_c)
    _, oc2 = attn_decoupled(pert)
    assert oc.tobytes() == oc2.tobytes()


def test_full_differs_from_decoupled_somewhere():
    found = False
    for s in range(50):
        inp = _inputs(s, 4, 4, 4)
        _, oc_full = attn_icc_full(inp)
        _, oc_dec = attn_decoupled(inp)
        if np.max(np.abs(oc_full - oc_dec)) > 1e-3:
            found = True
            break
    assert found


def test_decoupled_weights_returned():
    inp = _inputs(12, 3, 2, 4)
    oz, oc, (pz, pc) = attn_decoupled(inp, return_weights=True)
    assert pz.shape == (3, 5) and pc.shape == (2, 2)
