import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evd.gating import (
    ConfigError, GateConfig, GateState, apply_schedule, combine_gate, gate_field, hysteresis_step,
    schedule_rho, smooth_activity, smooth_activity_adjoint, soft_gate,
)
from evd.latent import PatchSpec, ShapeError, patchify

SPEC = PatchSpec(1, 1, 1)
SHAPE = (2, 4, 5, 1)  # token grid 2 x 4 x 5
CFG = GateConfig()


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_smoothing_constant_map():
    a = np.full(40, 0.37)
    np.testing.assert_allclose(smooth_activity(a, SPEC, SHAPE), 0.37, rtol=0, atol=1e-15)


def test_smoothing_point_mass_spreads_one_ninth():
    a = np.zeros(50)
    a[25 + 2 * 5 + 2] = 1.0  # slice 1, centre of a 5 x 5 grid
    out = smooth_activity(a, SPEC, (2, 5, 5, 1)).reshape(2, 5, 5)
    expected = np.zeros((2, 5, 5))
    expected[1, 1:4, 1:4] = 1.0 / 9.0
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_smoothing_corner_averages_in_bounds_cells():
    a = np.zeros(40)
    a[0] = 1.0
    out = smooth_activity(a, SPEC, SHAPE).reshape(2, 4, 5)
    # corner cell has 4 in-bounds neighbours, edge cell (0, 1) has 6
    assert out[0, 0, 0] == pytest.approx(0.25)
    assert out[0, 0, 1] == pytest.approx(1 / 6)
    assert out[0, 1, 1] == pytest.approx(1 / 9)
    assert np.all(out[1] == 0)


def test_smoothing_disabled_and_length_mismatch():
    a = np.random.default_rng(0).uniform(size=40)
    np.testing.assert_array_equal(smooth_activity(a, SPEC, SHAPE, enabled=False), a)
    with pytest.raises(ShapeError):
        smooth_activity(np.zeros(39), SPEC, SHAPE)


def test_smoothing_adjoint_identity():
    rng = np.random.default_rng(1)
    a, g = rng.standard_normal((3, 40)), rng.standard_normal((3, 40))
    lhs = np.sum(smooth_activity(a, SPEC, SHAPE) * g)
    rhs = np.sum(a * smooth_activity_adjoint(g, SPEC, SHAPE))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_soft_gate_examples():
    assert abs(soft_gate(np.array([0.5]), CFG)[0] - 0.5) < 1e-12
    assert abs(soft_gate(np.array([0.7]), CFG)[0] - _sigmoid(2.4)) < 1e-12
    assert soft_gate(np.array([0.7]), CFG)[0] == pytest.approx(0.9168273, abs=1e-7)
    assert soft_gate(np.array([0.3]), CFG)[0] == pytest.approx(0.0831727, abs=1e-7)


@pytest.mark.parametrize("a, prev, expected", [(0.9, 0, 1), (0.9, 1, 1), (0.1, 0, 0), (0.1, 1, 0),
                                               (0.5, 1, 1), (0.5, 0, 0), (0.62, 0, 1), (0.38, 1, 0)])
def test_hysteresis_cases(a, prev, expected):
    state = GateState(np.array([float(prev)]))
    new = hysteresis_step(np.array([a]), state, CFG)
    assert new.bin[0] == expected
    assert state.bin[0] == prev


def test_combine_examples():
    soft = np.array([0.3, 0.9168, 0.6])
    np.testing.assert_array_equal(combine_gate(soft, GateState(np.zeros(3))), 0.0)
    np.testing.assert_array_equal(combine_gate(soft, GateState(np.ones(3))), soft)
    assert combine_gate(soft, GateState(np.array([0.0, 1.0, 0.0])))[1] == 0.9168
    np.testing.assert_array_equal(combine_gate(soft, GateState(np.array([0.0, 1.0, 1.0])), "binary"), [0, 1, 1])


def test_schedule_examples():
    assert schedule_rho(0.5, CFG) == 1.0
    assert schedule_rho(0.8, CFG) == pytest.approx(0.5, abs=1e-12)
    assert schedule_rho(1.0, CFG) == 0.0
    g = np.array([0.4, 0.0, 1.0])
    np.testing.assert_array_equal(apply_schedule(g, 1.0), g)
    np.testing.assert_array_equal(apply_schedule(g, 0.0), 1.0)
    assert apply_schedule(g, 0.5)[0] == pytest.approx(0.7, abs=1e-15)
    with pytest.raises(ValueError):
        apply_schedule(g, 1.2)


def test_gate_field_examples():
    spec = PatchSpec(1, 2, 2)
    rng = np.random.default_rng(0)
    v = rng.standard_normal((2, 4, 4, 3))
    np.testing.assert_array_equal(gate_field(v, np.ones(8), spec), v)
    np.testing.assert_array_equal(gate_field(v, np.zeros(8), spec), 0)
    g = np.ones(8)
    g[5] = 0.5  # frame 1, rows 0-1, cols 2-3
    expected = v.copy()
    for r in range(0, 2):
        for c in range(2, 4):
            expected[1, r, c, :] *= 0.5
    np.testing.assert_array_equal(gate_field(v, g, spec), expected)
    with pytest.raises(ShapeError):
        gate_field(v, np.ones(7), spec)


@pytest.mark.parametrize("kwargs", [dict(tau_on=0.3, tau_off=0.5), dict(beta=0.0), dict(t_star=1.0),
                                    dict(tau_on=1.0), dict(combine="sum")])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        GateConfig(**kwargs)


@settings(max_examples=200, deadline=None)
@given(seq=st.lists(st.floats(0, 1), min_size=1, max_size=40), start=st.sampled_from([0.0, 1.0]))
def test_hysteresis_flips_only_on_crossings(seq, start):
    state = GateState(np.array([start]))
    for a in seq:
        new = hysteresis_step(np.array([a]), state, CFG)
        if new.bin[0] != state.bin[0]:
            assert (new.bin[0] == 1 and a >= CFG.tau_on) or (new.bin[0] == 0 and a <= CFG.tau_off)
        if CFG.tau_off < a < CFG.tau_on:
            assert new.bin[0] == state.bin[0]
        assert new.bin[0] in (0.0, 1.0)
        state = new


@settings(max_examples=100, deadline=None)
@given(a1=st.floats(0, 1), a2=st.floats(0, 1), b=st.sampled_from([0.0, 1.0]))
def test_gate_monotone_in_activity(a1, a2, b):
    lo, hi = sorted((a1, a2))
    st_ = GateState(np.array([b]))
    g_lo = combine_gate(soft_gate(np.array([lo]), CFG), st_)
    g_hi = combine_gate(soft_gate(np.array([hi]), CFG), st_)
    assert g_lo[0] <= g_hi[0]
    assert 0.0 <= g_hi[0] <= 1.0


@settings(max_examples=100, deadline=None)
@given(g=st.floats(0, 1), rho=st.floats(0, 1))
def test_schedule_blend_moves_toward_one(g, rho):
    out = apply_schedule(np.array([g]), rho)[0]
    assert out - g == pytest.approx((1 - rho) * (1 - g), abs=1e-12)


def test_gate_field_batched_matches_loop():
    spec = PatchSpec(2, 2, 2)
    rng = np.random.default_rng(3)
    v = rng.standard_normal((3, 4, 4, 4, 2))
    g = rng.uniform(size=(3, 8))
    out = gate_field(v, g, spec)
    for b in range(3):
        np.testing.assert_array_equal(out[b], gate_field(v[b], g[b], spec))
    np.testing.assert_allclose(patchify(out, spec), g[..., None] * patchify(v, spec))
