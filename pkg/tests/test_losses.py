import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evd.flow import TimeWeightConfig
from evd.gating import ConfigError
from evd.latent import ShapeError
from evd.losses import (
    LossConfig, loss_base, loss_cons, loss_cons_grad, loss_event, loss_event_grad, loss_order, loss_real,
    loss_real_grad, loss_total,
)


def _delta(seed=0, shape=(2, 8, 4)):
    return np.random.default_rng(seed).standard_normal(shape)


def test_loss_base_examples():
    rng = np.random.default_rng(0)
    z0, z1 = rng.standard_normal((2, 4, 4, 2)), rng.standard_normal((2, 4, 4, 2))
    assert loss_base(z1 - z0, z0, z1) == 0.0
    assert loss_base(np.zeros_like(z1), np.zeros_like(z1), z1) == pytest.approx(np.mean(z1**2), abs=1e-15)
    v = rng.standard_normal(z1.shape)
    brute = sum((a - (c - b)) ** 2 for a, b, c in zip(v.ravel(), z0.ravel(), z1.ravel())) / v.size
    assert abs(loss_base(v, z0, z1) - brute) < 1e-12
    with pytest.raises(ShapeError):
        loss_base(v[:1], z0, z1)


def test_loss_real_examples():
    d = _delta()
    assert loss_real(np.ones(d.shape[:-1]), d) == 0.0
    assert loss_real(np.zeros(d.shape[:-1]), d) == pytest.approx(np.mean(d**2), abs=1e-15)
    a = np.array([0.5, 1.0, 1.0, 1.0])
    delta = np.array([[2.0], [0.0], [0.0], [0.0]])
    assert loss_real(a, delta) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ShapeError):
        loss_real(np.ones(3), delta)


def test_loss_cons_examples():
    d = _delta()
    a = np.random.default_rng(1).uniform(size=d.shape[:-1])
    assert loss_cons(a, d, a, d) == 0.0
    z = np.zeros(d.shape[:-1])
    assert loss_cons(z, d, z, _delta(2)) == 0.0
    assert loss_cons(np.ones(1), np.ones((1, 1)), np.ones(1), np.full((1, 1), 3.0)) == 4.0
    with pytest.raises(ShapeError):
        loss_cons(a, d, a[:1], d[:1])


def test_loss_order_examples():
    d = _delta()
    n = d.shape[:-1]
    assert loss_order(np.full(n, 0.62), d, 0.62, 0.38) == 0.0
    assert loss_order(np.full(n, 0.1), d, 0.62, 0.38) == pytest.approx(2 * np.mean(d**2), abs=1e-15)
    assert loss_order(np.full(n, 0.5), d, 0.62, 0.38) == pytest.approx(np.mean(d**2), abs=1e-15)
    with pytest.raises(ConfigError):
        loss_order(np.full(n, 0.5), d, 0.3, 0.4)


def test_loss_total_examples():
    parts = {"base": 1.5, "real": 0.4, "cons": 0.2, "order": 0.1}
    zero = LossConfig(lambda_real=0, lambda_cons=0, lambda_order=0)
    assert loss_total(parts, 0.9, zero).total == 1.5
    cfg = LossConfig()
    early = loss_total(parts, 0.3, cfg)
    assert early.weight == 1.0
    assert early.total == pytest.approx(1.5 + 0.12 * 0.4 + 0.08 * 0.2 + 0.03 * 0.1, abs=1e-15)
    late = loss_total(parts, 1.0, cfg)
    assert abs(late.weight - math.exp(-2.4)) < 1e-12
    assert late.total == pytest.approx(1.5 + math.exp(-2.4) * (0.048 + 0.016 + 0.003), abs=1e-14)


def test_loss_total_event_term_and_scale():
    parts = {"base": 1.0, "real": 1.0, "event": 0.5}
    cfg = LossConfig(lambda_event=2.0)
    out = loss_total(parts, 0.1, cfg, scale=0.5)
    assert out.total == pytest.approx(1.0 + 0.5 * 0.12 + 1.0, abs=1e-15)
    assert out.event == 0.5


@pytest.mark.parametrize("kwargs", [dict(lambda_real=-1.0), dict(tau_on=0.3, tau_off=0.4),
                                    dict(delta_jitter=0.0), dict(p_event_dropout=1.5)])
def test_loss_config_validation(kwargs):
    with pytest.raises(ConfigError):
        LossConfig(**kwargs)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), t=st.floats(0, 1))
def test_terms_non_negative_and_total_at_least_base(seed, t):
    rng = np.random.default_rng(seed)
    d1, d2 = rng.standard_normal((2, 6, 3)) * rng.uniform(0, 3)
    a1, a2 = rng.uniform(size=(2, 6))
    parts = {
        "base": float(rng.uniform(0, 2)), "real": loss_real(a1, d1), "cons": loss_cons(a1, d1, a2, d2),
        "order": loss_order(a1, d1, 0.62, 0.38),
    }
    assert all(v >= 0 for v in parts.values())
    out = loss_total(parts, t, LossConfig())
    assert out.total >= out.base
    lam = (0.12, 0.08, 0.03)
    assert out.total == pytest.approx(out.base + out.weight * sum(l * parts[k] for l, k in zip(lam, ("real", "cons", "order"))))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_order_subset_structure(seed):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((5, 2))
    a = rng.uniform(size=5)
    on = np.mean(((a < 0.62)[:, None] * d) ** 2)
    off = np.mean(((a < 0.38)[:, None] * d) ** 2)
    assert loss_order(a, d, 0.62, 0.38) == pytest.approx(on + off, abs=1e-15)
    assert off <= on + 1e-15


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def test_term_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    a1, a2 = rng.uniform(size=(2, 2, 4))
    d1, d2 = rng.standard_normal((2, 2, 4, 3))
    da, dd = loss_real_grad(a1, d1)
    np.testing.assert_allclose(da, _fd(lambda: loss_real(a1, d1), a1), atol=1e-8)
    np.testing.assert_allclose(dd, _fd(lambda: loss_real(a1, d1), d1), atol=1e-8)
    grads = loss_cons_grad(a1, d1, a2, d2)
    for g, x in zip(grads, (a1, d1, a2, d2)):
        np.testing.assert_allclose(g, _fd(lambda: loss_cons(a1, d1, a2, d2), x), atol=1e-8)
    x, y = rng.standard_normal((2, 4)), rng.uniform(size=(2, 4))
    np.testing.assert_allclose(loss_event_grad(x, y), _fd(lambda: loss_event(x, y), x), atol=1e-8)


def test_time_weight_config_in_loss():
    cfg = LossConfig(time_weight=TimeWeightConfig(0.5, 2.0))
    assert loss_total({"base": 0.0, "real": 1.0}, 1.0, cfg).weight == pytest.approx(math.exp(-1.0))
