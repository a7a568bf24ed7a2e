"""Self-contained invariant suite run by the ``check`` verb.

Each check builds its own tiny fixtures, compares against an independent
reference (closed form, brute force, finite differences or a hand-written
reference implementation) and returns a ``CheckResult``. Nothing here reads
files or depends on trained weights.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .backbone import EventHead, MicroDiT, ModelConfig, OracleField, init_random, init_zero_impact
from .flow import TimeWeightConfig, time_weight
from .gating import GateConfig, GateState, hysteresis_step, soft_gate
from .latent import PatchSpec, SceneParams, dyadic, make_contact_scene, random_scene_params
from .losses import LossConfig, loss_base_grad, loss_cons, loss_order, loss_real
from .pseudo import (
    diffuseness_filter, excess_activity, latent_change_magnitude, phase_target, pseudo_activity, suppress_camera,
)
from .sampling import SamplerConfig, cfg_combine, sample
from .training import AdamW, Batch, Draws, TrainConfig, Trainer, clip_global_norm, evd_objective, lr_factor

# micro configuration for the gradient and zero-impact checks: N = 8 tokens, width 8, two blocks
MICRO = ModelConfig(latent_shape=(2, 4, 4, 2), patch=(1, 2, 2), width=8, depth=2, heads=2, cond_dim=3, head_hidden=6)
SAMPLE_MICRO = ModelConfig(latent_shape=(4, 4, 4, 2), patch=(2, 2, 2), width=8, depth=2, heads=2, cond_dim=3,
                           head_hidden=6)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def check_gate_arithmetic(n_sequences: int = 100_000, length: int = 24, seed: int = 0) -> CheckResult:
    cfg = GateConfig()
    e1 = abs(float(soft_gate(np.array([0.5]), cfg)[0]) - 0.5)
    e2 = abs(float(soft_gate(np.array([0.7]), cfg)[0]) - _sigmoid(2.4))
    rng = np.random.default_rng(seed)
    # mix of uniform draws and values pinned to the thresholds so boundary cases are exercised
    seqs = rng.uniform(size=(length, n_sequences))
    pins = rng.uniform(size=seqs.shape) < 0.1
    seqs[pins] = rng.choice([cfg.tau_on, cfg.tau_off, 0.5], size=int(pins.sum()))
    state = GateState(rng.integers(0, 2, n_sequences).astype(np.float64))
    bad_flip = bad_hold = 0
    for a in seqs:
        new = hysteresis_step(a, state, cfg)
        flipped = new.bin != state.bin
        up_ok = (new.bin == 1) & (a >= cfg.tau_on)
        down_ok = (new.bin == 0) & (a <= cfg.tau_off)
        bad_flip += int(np.sum(flipped & ~(up_ok | down_ok)))
        band = (a > cfg.tau_off) & (a < cfg.tau_on)
        bad_hold += int(np.sum(band & flipped))
        # outside the band the state must follow the crossing
        bad_flip += int(np.sum((a >= cfg.tau_on) & (new.bin != 1)) + np.sum((a <= cfg.tau_off) & (new.bin != 0)))
        state = new
    ok = e1 <= 1e-12 and e2 <= 1e-12 and bad_flip == 0 and bad_hold == 0
    return CheckResult("gate arithmetic", ok, f"|g(0.5)-0.5|={e1:.1e}, |g(0.7)-sigma(2.4)|={e2:.1e}, "
                       f"{n_sequences} sequences: {bad_flip} bad flips, {bad_hold} band violations")


def _sample_models(seed: int):
    m, h = MicroDiT(SAMPLE_MICRO), EventHead(SAMPLE_MICRO.width, SAMPLE_MICRO.head_hidden)
    init_random(m, h, seed, 0.5)
    return m, h


def check_base_recovery(runs: int = 20) -> CheckResult:
    mismatches = 0
    for seed in range(runs):
        m, h = _sample_models(seed)
        y = np.random.default_rng(seed).standard_normal(SAMPLE_MICRO.cond_dim)
        solver = "heun" if seed % 2 else "euler"
        a, ta = sample(m, h, y, SamplerConfig(K=6, solver=solver, schedule_mode="off"), seed=seed)
        b, tb = sample(m, h, y, SamplerConfig(K=6, solver=solver, gating_enabled=False), seed=seed)
        if not (np.array_equal(a, b) and np.array_equal(ta.latents, tb.latents)):
            mismatches += 1
    return CheckResult("base-model recovery", mismatches == 0, f"{runs} seeded runs, {mismatches} not bit-identical")


def check_solver_exactness() -> CheckResult:
    worst = 0.0
    spec = PatchSpec(2, 2, 2)
    for K in (1, 4, 50):
        for solver in ("euler", "heun"):
            rng = np.random.default_rng(K)
            z0, z1 = rng.standard_normal((2, 4, 4, 4, 2))
            zf, _ = sample(OracleField(z0, z1, spec), None, np.zeros(3), SamplerConfig(K=K, solver=solver,
                                                                                     gating_enabled=False), z0=z0)
            worst = max(worst, float(np.max(np.abs(zf - z1))))
    return CheckResult("solver exactness", worst < 1e-10, f"max |z_K - z1| = {worst:.2e} over K in (1, 4, 50) x {{euler, heun}}")


def check_cfg_identities(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    vc, vu = rng.standard_normal((2, 4, 4, 4, 2))
    e0 = float(np.max(np.abs(cfg_combine(vc, vu, 0.0) - vc)))
    e1 = max(float(np.max(np.abs(cfg_combine(vc, vc, w) - vc))) for w in (0.5, 2.5, 4.0, 8.0, 100.0))
    ok = e0 <= 1e-12 and e1 <= 1e-12
    return CheckResult("cfg identities", ok, f"w=0 error {e0:.1e}; equal branches error {e1:.1e}")


def _micro_pair(seed: int, zero_impact: bool = False):
    m, h = MicroDiT(MICRO), EventHead(MICRO.width, MICRO.head_hidden)
    if zero_impact:
        init_zero_impact(m, h, seed)
    else:
        init_random(m, h, seed, 0.7)
    return m, h


GRAD_LOSS = LossConfig(lambda_real=0.5, lambda_cons=0.7, lambda_order=0.3, lambda_event=0.4)


def check_gradients(seeds: int = 10, coords: int = 3, h: float = 1e-5, floor: float = 1e-6) -> CheckResult:
    """Central differences of the total objective against the analytic gradient, every parameter array."""
    worst, count = 0.0, 0
    for seed in range(seeds):
        m, head = _micro_pair(seed)
        rng = np.random.default_rng(seed + 1000)
        z1 = rng.standard_normal((2,) + MICRO.latent_shape)
        batch = Batch(z1, rng.standard_normal((2, MICRO.cond_dim)), rng.uniform(size=(2, MICRO.n_tokens)))
        t = float(rng.uniform(0.1, 0.9))
        draws = Draws(rng.standard_normal(z1.shape), t, min(1.0, t + 0.04), np.array([False, seed % 2 == 0]),
                      np.array([seed % 3 == 0, False]))
        _, grads = evd_objective(m, head, batch, draws, GRAD_LOSS)

        def total():
            return evd_objective(m, head, batch, draws, GRAD_LOSS, need_grads=False)[0].total

        for group, obj in (("backbone", m), ("head", head)):
            for name, p in obj.params.items():
                for _ in range(coords):
                    idx = np.unravel_index(rng.integers(p.size), p.shape)
                    old = p[idx]
                    p[idx] = old + h
                    fp = total()
                    p[idx] = old - h
                    fm = total()
                    p[idx] = old
                    fd, an = (fp - fm) / (2 * h), float(grads[group][name][idx])
                    scale = max(abs(fd), abs(an))
                    if scale < floor:
                        continue
                    worst = max(worst, abs(fd - an) / scale)
                    count += 1
    return CheckResult("gradient correctness", worst < 1e-4,
                       f"max relative error {worst:.2e} over {count} coordinates, {seeds} seeds, h={h:g}")


def check_loss_identities(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((2, 8, 6))
    n = d.shape[:-1]
    errs = {
        "real(a=1)": abs(loss_real(np.ones(n), d)),
        "real(a=0)": abs(loss_real(np.zeros(n), d) - np.mean(d**2)),
        "order(a>=on)": abs(loss_order(np.full(n, 0.62), d, 0.62, 0.38)) + abs(loss_order(np.full(n, 0.9), d, 0.62, 0.38)),
        "order(a<off)": abs(loss_order(np.full(n, 0.2), d, 0.62, 0.38) - 2 * np.mean(d**2)),
    }
    # consistency at delta = 0 through the full objective with a deterministic backbone
    m, h = _micro_pair(seed)
    z1 = rng.standard_normal((2,) + MICRO.latent_shape)
    draws = Draws(rng.standard_normal(z1.shape), 0.4, 0.4, np.zeros(2, bool), np.zeros(2, bool))
    out, _ = evd_objective(m, h, Batch(z1, rng.standard_normal((2, 3))), draws, LossConfig(), need_grads=False)
    errs["cons(delta=0)"] = abs(out.cons) + abs(loss_cons(np.ones(n), d, np.ones(n), d))
    tw = TimeWeightConfig(0.6, 6.0)
    errs["w continuity"] = abs(time_weight(0.6, tw) - time_weight(0.6 + 1e-13, tw))
    errs["w(1)"] = abs(time_weight(1.0, tw) - math.exp(-2.4))
    worst = max(errs.values())
    return CheckResult("loss identities", worst <= 1e-12, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


def _pure_fm_reference(m: MicroDiT, z1, y, draws: Draws, cfg: TrainConfig) -> None:
    yy = np.where(draws.uncond[:, None], 0.0, y)
    v, _, cache = m.forward(draws.t * z1 + (1 - draws.t) * draws.z0, yy, draws.t)
    g = m.backward(cache, dv=loss_base_grad(v, draws.z0, z1))
    (g,), _ = clip_global_norm([g], cfg.grad_clip)
    AdamW(m.params, cfg.lr_backbone, cfg.betas, cfg.weight_decay, cfg.eps).step(g, lr_factor(0, cfg.warmup_steps, cfg.steps))


def check_zero_impact(seeds: int = 5) -> CheckResult:
    max_a, max_v, mismatch = 0.0, 0.0, 0
    for seed in range(seeds):
        m, h = _micro_pair(seed, zero_impact=True)
        rng = np.random.default_rng(seed)
        z1 = rng.standard_normal((3,) + MICRO.latent_shape)
        y = rng.standard_normal((3, MICRO.cond_dim))
        v, s = m(z1, y, float(rng.uniform()))
        max_v = max(max_v, float(np.max(np.abs(v))))
        max_a = max(max_a, float(np.max(h(s, 0.3))))
        ref = MicroDiT(MICRO)
        for k in m.params:
            ref.params[k][...] = m.params[k]
        tcfg = TrainConfig(steps=10, freeze_head=True, seed=seed)
        lcfg = LossConfig(lambda_real=0.0, lambda_cons=0.0, lambda_order=0.0)
        draws = Draws.sample(rng, 3, MICRO.latent_shape, lcfg, 0.3)
        Trainer(m, h, lcfg, tcfg).train_step(Batch(z1, y), draws)
        _pure_fm_reference(ref, z1, y, draws, tcfg)
        mismatch += sum(not np.array_equal(m.params[k], ref.params[k]) for k in m.params)
    ok = max_a < 0.003 and max_v == 0.0 and mismatch == 0
    return CheckResult("zero-impact initialization", ok,
                       f"max activity {max_a:.2e}, max |v| {max_v:.1e}, {mismatch} arrays differ from pure FM step")


def _swept_tokens(z, ph, pw) -> list[set]:
    t, hh, ww, _ = z.shape
    out = []
    for tau in range(t - 1):
        diff = np.any(z[tau + 1] != z[tau], axis=-1)
        out.append({(y // ph) * (ww // pw) + x // pw for y, x in zip(*np.nonzero(diff))})
    return out


def check_pseudo_targets(n_scenes: int = 40, n_drift: int = 10) -> CheckResult:
    drift_bad = 0
    for seed in range(n_drift):
        rng = np.random.default_rng(seed)
        drift = dyadic(np.cumsum(rng.uniform(-1, 1, size=(16, 4)), axis=0))
        s = make_contact_scene(SceneParams(velocity=(0, 0), camera_drift=drift, seed=seed))
        m = suppress_camera(latent_change_magnitude(s.clean_latent, s.patch))
        accept, _ = diffuseness_filter(excess_activity(s.clean_latent, s.patch))
        drift_bad += int(np.any(m != 0.0) or accept)
    phase_bad = 0
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = rng.uniform(size=(9, 16)) * (rng.uniform(size=(9, 1)) < 0.6)
        eps = float(rng.uniform(1e-8, 1e-3))
        p = phase_target(a, eps)
        total = a.sum()
        phase_bad += int(np.any(np.diff(p) < 0) or abs(p[-1] - total / (total + eps)) > 1e-12)
    loc_bad = 0
    rng = np.random.default_rng(2)
    for k in range(n_scenes):
        params = random_scene_params(rng, background_seed=k)
        s = make_contact_scene(params)
        a = pseudo_activity(s.clean_latent, s.patch)
        for tau, swept in enumerate(_swept_tokens(s.clean_latent, s.patch.ph, s.patch.pw)):
            active = set(np.flatnonzero(a[tau] > a[tau].min())) if a[tau].max() > a[tau].min() else set()
            loc_bad += int(active != swept)
    ok = drift_bad == 0 and phase_bad == 0 and loc_bad == 0
    return CheckResult("pseudo-target properties", ok, f"drift scenes failing {drift_bad}/{n_drift}, "
                       f"phase violations {phase_bad}/200, localization mismatches {loc_bad} frames over {n_scenes} scenes")


def check_evaluation_count() -> CheckResult:
    m, h = _sample_models(0)
    counts = {}
    for solver in ("euler", "heun"):
        for K in (1, 7, 20):
            _, traj = sample(m, h, np.zeros(3), SamplerConfig(K=K, solver=solver), seed=0)
            counts[(solver, K)] = traj.evaluations / K
    ok = all(v == (2 if s == "euler" else 4) for (s, _), v in counts.items())
    return CheckResult("evaluation count", ok, "per-step evaluations " + ", ".join(
        f"{s}/K={K}: {v:g}" for (s, K), v in counts.items()))


def check_unit_gate_equivalence() -> CheckResult:
    """Events forced to one with a binary gate must reproduce ungated sampling on the oracle field."""
    rng = np.random.default_rng(3)
    z0, z1 = rng.standard_normal((2, 4, 4, 4, 2))
    field = OracleField(z0, z1, PatchSpec(2, 2, 2))
    ones = lambda s, t, z: np.ones((1, 8))
    a, _ = sample(field, None, np.zeros(3), SamplerConfig(K=10, gate=GateConfig(combine="binary")), z0=z0, events=ones)
    b, _ = sample(field, None, np.zeros(3), SamplerConfig(K=10, gating_enabled=False), z0=z0)
    err = float(np.max(np.abs(a - b)))
    return CheckResult("unit gate equivalence", err == 0.0, f"max difference {err:.1e}")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "gate_arithmetic": check_gate_arithmetic,
    "base_recovery": check_base_recovery,
    "solver_exactness": check_solver_exactness,
    "cfg_identities": check_cfg_identities,
    "gradients": check_gradients,
    "loss_identities": check_loss_identities,
    "zero_impact": check_zero_impact,
    "pseudo_targets": check_pseudo_targets,
    "evaluation_count": check_evaluation_count,
    "unit_gate": check_unit_gate_equivalence,
}


def timed(fn: Callable[[], CheckResult]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        res = fn()
    except Exception as e:  # a crashing check is a failing check
        res = CheckResult(getattr(fn, "__name__", "check"), False, f"raised {type(e).__name__}: {e}")
    res.seconds = time.perf_counter() - t0
    return res


def run_all(names=None) -> list[CheckResult]:
    return [timed(CHECKS[n]) for n in (names or CHECKS)]
