import numpy as np
import pytest

from evd.backbone import EventHead, MicroDiT, ModelConfig, init_random, init_zero_impact
from evd.gating import ConfigError
from evd.losses import LossConfig, loss_base_grad
from evd.training import (
    AdamW, Batch, Draws, TrainConfig, Trainer, clip_global_norm, ema_decay_at, ema_update, evd_objective,
    global_norm, lr_factor,
)

# micro config: N = 8 tokens, d = 8, two blocks
MICRO = ModelConfig(latent_shape=(2, 4, 4, 2), patch=(1, 2, 2), width=8, depth=2, heads=2, cond_dim=3, head_hidden=6)
FULL = LossConfig(lambda_real=0.5, lambda_cons=0.7, lambda_order=0.3, lambda_event=0.4)


def _setup(seed, init=init_random, batch=2):
    m, h = MicroDiT(MICRO), EventHead(MICRO.width, MICRO.head_hidden)
    if init is init_random:
        init(m, h, seed, 0.7)
    else:
        init(m, h, seed)
    rng = np.random.default_rng(seed + 1000)
    z1 = rng.standard_normal((batch,) + MICRO.latent_shape)
    y = rng.standard_normal((batch, MICRO.cond_dim))
    return m, h, rng, z1, y


def _total(m, h, batch, draws, cfg):
    return evd_objective(m, h, batch, draws, cfg, need_grads=False)[0].total


@pytest.mark.parametrize("seed", range(10))
def test_total_loss_gradient_matches_finite_differences(seed):
    m, h, rng, z1, y = _setup(seed)
    batch = Batch(z1, y, rng.uniform(size=(2, MICRO.n_tokens)))
    t = float(rng.uniform(0.1, 0.9))
    draws = Draws(rng.standard_normal(z1.shape), t, t + 0.04, np.array([False, seed % 2 == 0]), np.array([seed % 3 == 0, False]))
    _, grads = evd_objective(m, h, batch, draws, FULL)
    step = 1e-5
    for group, obj in (("backbone", m), ("head", h)):
        for name, p in obj.params.items():
            for _ in range(2):
                idx = np.unravel_index(rng.integers(p.size), p.shape)
                old = p[idx]
                p[idx] = old + step
                fp = _total(m, h, batch, draws, FULL)
                p[idx] = old - step
                fm = _total(m, h, batch, draws, FULL)
                p[idx] = old
                fd = (fp - fm) / (2 * step)
                an = grads[group][name][idx]
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-4), (group, name, fd, an)


def test_raw_activity_variant_gradients():
    m, h, rng, z1, y = _setup(3)
    cfg = LossConfig(lambda_real=0.5, lambda_cons=0.7, lambda_order=0.3, use_smoothed_activity_in_losses=False)
    batch = Batch(z1, y)
    draws = Draws(rng.standard_normal(z1.shape), 0.3, 0.33, np.array([False, False]), np.array([False, False]))
    _, grads = evd_objective(m, h, batch, draws, cfg)
    p = h.params["fc1.W"]
    old = p[1, 2]
    p[1, 2] = old + 1e-5
    fp = _total(m, h, batch, draws, cfg)
    p[1, 2] = old - 1e-5
    fm = _total(m, h, batch, draws, cfg)
    p[1, 2] = old
    assert (fp - fm) / 2e-5 == pytest.approx(grads["head"]["fc1.W"][1, 2], rel=1e-5)


def test_event_dropout_forced():
    m, h, rng, z1, y = _setup(1)
    draws = Draws(rng.standard_normal(z1.shape), 0.4, 0.42, np.array([True, True]), np.array([False, False]))
    out, grads = evd_objective(m, h, Batch(z1, y), draws, LossConfig(p_event_dropout=1.0))
    v, _ = m(0.4 * z1 + 0.6 * draws.z0, y, 0.4)
    tok = v.reshape(2, 2, 2, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5, 6).reshape(2, 8, -1)
    assert out.real == pytest.approx(np.mean(tok**2), rel=1e-12)
    assert out.cons == 0.0
    for g in grads["head"].values():
        assert np.all(g == 0.0)


def _pure_fm_step(m, z1, y, draws, cfg: TrainConfig):
    """Reference flow-matching step written without any event machinery."""
    yy = np.where(draws.uncond[:, None], 0.0, y)
    v, _, cache = m.forward(draws.t * z1 + (1 - draws.t) * draws.z0, yy, draws.t)
    g = m.backward(cache, dv=loss_base_grad(v, draws.z0, z1))
    (g,), _ = clip_global_norm([g], cfg.grad_clip)
    opt = AdamW(m.params, cfg.lr_backbone, cfg.betas, cfg.weight_decay, cfg.eps)
    opt.step(g, lr_factor(0, cfg.warmup_steps, cfg.steps))


@pytest.mark.parametrize("seed", range(3))
def test_zero_lambdas_match_pure_flow_matching_bitwise(seed):
    m, h, rng, z1, y = _setup(seed, init=init_zero_impact, batch=3)
    ref = MicroDiT(MICRO)
    for k in m.params:
        ref.params[k][...] = m.params[k]
    tcfg = TrainConfig(steps=10, freeze_head=True, seed=seed)
    lcfg = LossConfig(lambda_real=0, lambda_cons=0, lambda_order=0)
    trainer = Trainer(m, h, lcfg, tcfg)
    draws = Draws.sample(np.random.default_rng(seed), 3, MICRO.latent_shape, lcfg, 0.3)
    trainer.train_step(Batch(z1, y), draws)
    _pure_fm_step(ref, z1, y, draws, tcfg)
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], ref.params[k])


def test_zero_impact_objective_is_base_loss():
    m, h, rng, z1, y = _setup(0, init=init_zero_impact)
    draws = Draws(rng.standard_normal(z1.shape), 0.3, 0.31, np.zeros(2, bool), np.zeros(2, bool))
    out, _ = evd_objective(m, h, Batch(z1, y), draws, LossConfig())
    assert out.base == pytest.approx(np.mean((z1 - draws.z0) ** 2), rel=1e-12)
    assert abs(out.total - out.base) < 1e-6


def test_draw_order_and_jitter_clipping():
    cfg = LossConfig(delta_jitter=0.5)
    for seed in range(200):
        d = Draws.sample(np.random.default_rng(seed), 2, (1, 1, 1, 1), cfg, 0.1)
        assert 0.0 <= d.t2 <= 1.0
        assert abs(d.t2 - min(1.0, max(0.0, d.t))) <= 0.5
    rng = np.random.default_rng(5)
    d = Draws.sample(np.random.default_rng(5), 2, (1, 1, 1, 1), cfg, 0.1)
    np.testing.assert_array_equal(d.z0, rng.standard_normal((2, 1, 1, 1, 1)))
    assert d.t == rng.uniform(0.0, 1.0)


def test_non_finite_loss_names_term():
    m, h, rng, z1, y = _setup(0)
    z1[0, 0, 0, 0, 0] = np.nan
    trainer = Trainer(m, h, FULL, TrainConfig(steps=2))
    with pytest.raises(FloatingPointError, match="base"):
        trainer.train_step(Batch(z1, y))


def test_clip_examples():
    g = [{"a": np.array([0.3, 0.0]), "b": np.array([[0.0, 0.4]])}]
    out, norm = clip_global_norm(g, 1.0)
    assert norm == pytest.approx(0.5)
    assert out is g
    g2 = [{"a": np.array([0.6, 0.0])}, {"b": np.array([0.8])}]
    out, norm = clip_global_norm(g2, 0.5)
    assert norm == 1.0
    np.testing.assert_array_equal(out[0]["a"], [0.3, 0.0])
    np.testing.assert_array_equal(out[1]["b"], [0.4])
    assert global_norm(out) == pytest.approx(0.5)


def test_ema_examples():
    e = {"w": np.array([1.0, 2.0])}
    ema_update(e, {"w": np.array([5.0, 5.0])}, 1.0)
    np.testing.assert_array_equal(e["w"], [1.0, 2.0])
    ema_update(e, {"w": np.array([5.0, 6.0])}, 0.5)
    np.testing.assert_array_equal(e["w"], [3.0, 4.0])
    assert ema_decay_at(0, 0.999) == pytest.approx(0.1)
    assert ema_decay_at(10**6, 0.999) == 0.999


def test_lr_schedule():
    assert lr_factor(0, 10, 100) == pytest.approx(0.1)
    assert lr_factor(9, 10, 100) == 1.0
    assert lr_factor(10, 10, 100) == 1.0
    assert lr_factor(100, 10, 100) == pytest.approx(0.0, abs=1e-15)
    assert lr_factor(55, 10, 100) == pytest.approx(0.5)


def test_adamw_decays_matrices_only():
    p = {"W": np.ones((2, 2)), "b": np.ones(2)}
    opt = AdamW(p, lr=0.1, weight_decay=0.5)
    opt.step({"W": np.zeros((2, 2)), "b": np.zeros(2)})
    np.testing.assert_allclose(p["W"], 0.95)
    np.testing.assert_array_equal(p["b"], 1.0)


def test_two_lr_groups_and_frozen_backbone():
    m, h, rng, z1, y = _setup(2, init=init_zero_impact)
    before = {k: v.copy() for k, v in m.params.items()}
    trainer = Trainer(m, h, LossConfig(lambda_event=1.0), TrainConfig(steps=3, freeze_backbone=True, lr_event=0.1))
    batch = trainer.prepare(z1, y)
    assert batch.targets.shape == (2, MICRO.n_tokens)
    trainer.train_step(batch)
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], before[k])
    assert trainer.opt_head.lr == 0.1 and trainer.opt_backbone.lr == TrainConfig().lr_backbone


def test_training_reduces_base_loss():
    m, h, rng, z1, y = _setup(0, init=init_zero_impact, batch=4)
    z1 = np.broadcast_to(2.0 * np.sign(z1[0]), z1.shape).copy()  # one shared clip: the mean is learnable
    trainer = Trainer(m, h, LossConfig(), TrainConfig(steps=150, batch_size=4, lr_backbone=3e-3, warmup_steps=10))
    recs = trainer.fit(z1, y)
    first = np.mean([r.losses.base for r in recs[:15]])
    last = np.mean([r.losses.base for r in recs[-15:]])
    assert last < 0.7 * first


def test_fit_is_reproducible():
    runs = []
    for _ in range(2):
        m, h, rng, z1, y = _setup(4, init=init_zero_impact, batch=3)
        tr = Trainer(m, h, FULL, TrainConfig(steps=4, batch_size=2, seed=9))
        recs = tr.fit(z1, y)
        runs.append(([r.losses.total for r in recs], {k: v.copy() for k, v in m.params.items()}))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


@pytest.mark.parametrize("kwargs", [dict(steps=0), dict(lr_backbone=0.0), dict(betas=(0.9, 1.0)),
                                    dict(ema_decay=1.5), dict(p_uncond=-0.1), dict(grad_clip=0.0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)
