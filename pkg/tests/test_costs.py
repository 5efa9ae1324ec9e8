from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iccdit.attention import AttentionInputs, attn_decoupled, attn_dense
from iccdit.core import Rng
from iccdit.costs import (CONFIGS, FORMULAS, SIMPLIFIED, CostSpec, analytic_cost, cost_table,
                          interaction_count, measured_cost, model_interaction_count, scaling_curve)
from iccdit.kernels import counting
from iccdit.model import ModelConfig, ToyDiT

PAPER = dict(T=30, L=28, L_s=5, N_x=1, N_c=2, ratio=0.5)


def _report(config, **kw):
    args = dict(PAPER, **kw)
    return analytic_cost(CostSpec(config=config, **args))


def test_nine_configs():
    assert len(CONFIGS) == 9 and set(FORMULAS) == set(CONFIGS) == set(SIMPLIFIED)


@pytest.mark.parametrize("config,units,speedup", [
    ("no_condition", 840, Fraction(9)),
    ("baseline_icc", 7560, Fraction(1)),
    ("fulldit2", 995, Fraction(7560, 995)),
    ("step_cache_only", 2632, Fraction(270, 94)),
    ("layer_cache_only", 2040, Fraction(252, 68)),
    ("dts_only", 3360, Fraction(9, 4)),
    ("fulldit2_no_dts", 1160, Fraction(7560, 1160)),
    ("fulldit2_no_step_cache", 1140, Fraction(252, 38)),
    ("fulldit2_no_layer_cache", 1708, Fraction(270, 61)),
])
def test_paper_scenario(config, units, speedup):
    r = _report(config)
    assert r.interactions == units and r.speedup_exact == speedup


def test_printed_table_values():
    printed = {"no_condition": 9.00, "step_cache_only": 2.87, "layer_cache_only": 3.71,
               "dts_only": 2.25, "fulldit2_no_step_cache": 6.63, "fulldit2_no_layer_cache": 4.43}
    for c, v in printed.items():
        assert abs(_report(c).speedup - v) <= 0.01
    # two printed values disagree with their own formulas beyond rounding
    assert abs(_report("fulldit2").speedup - 7.57) <= 0.06
    assert abs(_report("fulldit2_no_dts").speedup - 6.57) <= 0.06
    assert round(_report("fulldit2").speedup, 3) == 7.598
    assert round(_report("fulldit2_no_dts").speedup, 3) == 6.517


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(1, 40), st.integers(1, 40), st.integers(1, 50))
def test_general_form_reduces_to_simplified(T, L, Ls, nx):
    Ls = min(Ls, L)
    for c in CONFIGS:
        assert interaction_count(T, L, Ls, nx, 2 * nx, 0.5, c) == SIMPLIFIED[c](T, L, Ls) * nx * nx


def test_baseline_speedup_is_one():
    assert _report("baseline_icc", N_x=7, N_c=3, ratio=0.3).speedup == 1.0


def test_hand_count_single_step_single_layer():
    # T=1, L=1, L_s=1, N_x=1, N_c=2, ratio 0.5 -> k=1
    expect = {"no_condition": 1, "baseline_icc": 9, "dts_only": 4, "step_cache_only": 1 * 3 + 4,
              "layer_cache_only": 9, "fulldit2": 1 * 2 + 1, "fulldit2_no_dts": 3 + 4,
              "fulldit2_no_step_cache": 2 + 1, "fulldit2_no_layer_cache": 2 + 1}
    for c, v in expect.items():
        assert interaction_count(1, 1, 1, 1, 2, 0.5, c) == v


def test_dominance_ordering():
    c = {k: _report(k).interactions for k in CONFIGS}
    # without token selection costs slightly more than without step caching
    # (1160 vs 1140, i.e. 6.52x vs 6.63x), so those two sit in that order
    assert (c["no_condition"] < c["fulldit2"] < c["fulldit2_no_step_cache"]
            < c["fulldit2_no_dts"] < c["fulldit2_no_layer_cache"] < c["baseline_icc"])


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(CONFIGS), st.integers(1, 20), st.integers(1, 10), st.integers(1, 10),
       st.integers(1, 20), st.integers(0, 40), st.floats(0.05, 1.0))
def test_monotone_in_each_argument(cfg, T, L, Ls, nx, nc, ratio):
    Ls = min(Ls, L)
    base = interaction_count(T, L, Ls, nx, nc, ratio, cfg)
    assert interaction_count(T + 1, L, Ls, nx, nc, ratio, cfg) >= base
    assert interaction_count(T, L + 1, Ls, nx, nc, ratio, cfg) >= base
    if Ls < L:
        assert interaction_count(T, L, Ls + 1, nx, nc, ratio, cfg) >= base
    assert interaction_count(T, L, Ls, nx + 1, nc, ratio, cfg) >= base
    assert interaction_count(T, L, Ls, nx, nc + 1, ratio, cfg) >= base


def test_cost_spec_validation():
    for bad in (dict(L_s=0), dict(L_s=29), dict(T=0), dict(N_x=0), dict(N_c=-1), dict(ratio=0.0),
                dict(config="nope")):
        with pytest.raises(ValueError):
            CostSpec(**dict(PAPER, config="fulldit2", **bad) if "config" not in bad else
                     dict(PAPER, **bad))


def test_cost_table_order():
    assert [r.config for r in cost_table(**PAPER)] == list(CONFIGS)


def test_scaling_curve_properties():
    rows = scaling_curve(CONFIGS, range(1, 9))
    assert len(rows) == 8
    for r in rows:
        assert Fraction(r["baseline_icc"], r["no_condition"]) == (1 + Fraction(r["N_c"], r["N_x"])) ** 2
        assert r["fulldit2"] == interaction_count(30, 28, 5, r["N_x"], r["N_c"], 0.5, "fulldit2")
    assert rows[1]["baseline_icc"] == 4 * rows[0]["baseline_icc"]
    with pytest.raises(ValueError):
        scaling_curve(CONFIGS, [])


def test_measured_single_dense_call():
    r = Rng(0)
    with counting() as ctr:
        attn_dense(r.normal((3, 4)), r.normal((5, 4)), r.normal((5, 4)))
    assert ctr.logits == 15


def test_measured_decoupled_call():
    r = Rng(1)
    inp = AttentionInputs(*(r.normal((n, 3)) for n in (4, 4, 4, 2, 2, 2)))
    with counting() as ctr:
        attn_decoupled(inp)
    assert ctr.logits == 4 * 6 + 2 * 2


@pytest.mark.parametrize("ratio,contexts,heads", [
    (0.5, (("ref", 16), ("traj", 16)), 2),
    (0.3, (("ref", 7), ("traj", 4)), 1),
    (1.0, (("ref", 5),), 4),
])
def test_measured_equals_analytic_off_paper_scenario(ratio, contexts, heads):
    for c in CONFIGS:
        cfg = ModelConfig(mode=c, ratio=ratio, contexts=contexts, heads=heads, L=3,
                          active_layers=(0, 2), n_z=5)
        m = ToyDiT.init(cfg, seed=0)
        ctx = Rng(2).normal((cfg.layout.n_c, cfg.d_latent))
        assert measured_cost(m, ctx, 3) == model_interaction_count(m, 3), c


def test_style_override_counts():
    assert interaction_count(1, 1, 1, 2, 2, 1.0, "baseline_icc", style="decoupled") == 2 * 4 + 4
    assert interaction_count(2, 1, 1, 2, 2, 1.0, "step_cache_only", style="masked") == 2 * 16
