"""Event-gated ODE sampling with classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backbone import EventHead
from .flow import TimeGrid, uniform_time_grid
from .gating import (
    ConfigError, GateConfig, GateState, apply_schedule, combine_gate, gate_field,
    hysteresis_step, schedule_rho, smooth_activity, soft_gate,
)
from .latent import PatchSpec, ShapeError

# activity provider: (final_tokens (B, N, d), t, z_t (B, T, H, W, C)) -> activity (B, N)
EventSource = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 50
    w_cfg: float = 4.0
    gate: GateConfig = field(default_factory=GateConfig)
    solver: str = "euler"
    gating_enabled: bool = True
    schedule_mode: str = "anneal"
    rho_const: float = 1.0
    event_branch: str = "cond"
    time_grid: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"sampler.K must be >= 1, got {self.K}")
        if self.w_cfg < 0:
            raise ConfigError(f"sampler.w_cfg must be non-negative, got {self.w_cfg}")
        if self.solver not in ("euler", "heun"):
            raise ConfigError(f"sampler.solver must be 'euler' or 'heun', got {self.solver!r}")
        if self.schedule_mode not in ("anneal", "const", "off"):
            raise ConfigError(f"sampler.schedule_mode must be anneal/const/off, got {self.schedule_mode!r}")
        if self.schedule_mode == "const" and not 0.0 <= self.rho_const <= 1.0:
            raise ConfigError(f"sampler.rho_const must lie in [0, 1], got {self.rho_const}")
        if self.event_branch not in ("cond", "uncond"):
            raise ConfigError(f"sampler.event_branch must be 'cond' or 'uncond', got {self.event_branch!r}")

    def grid(self) -> TimeGrid:
        if self.time_grid is not None:
            grid = TimeGrid(np.asarray(self.time_grid))
            if grid.K != self.K:
                raise ConfigError(f"sampler.time_grid has {grid.K} steps but K={self.K}")
            return grid
        return uniform_time_grid(self.K)

    def rho(self, t: float) -> float:
        if self.schedule_mode == "off":
            return 0.0
        if self.schedule_mode == "const":
            return self.rho_const
        return schedule_rho(t, self.gate)


@dataclass
class Trajectory:
    """Latents ``(K+1, B, ...)``; per-step gates, activities and schedule factors ``(K, B, N)``."""

    times: np.ndarray
    latents: np.ndarray
    gates: np.ndarray | None
    activities: np.ndarray | None
    rho: np.ndarray
    evaluations: int

    @property
    def updates(self) -> np.ndarray:
        return np.diff(self.latents, axis=0)


class EvalCounter:
    """Wraps a velocity field and counts per-trajectory backbone evaluations."""

    def __init__(self, field):
        self.field = field
        self.rows = 0

    def __call__(self, z, y, t):
        z = np.asarray(z)
        self.rows += 1 if z.ndim == 4 else z.shape[0]
        return self.field(z, y, t)


def cfg_combine(v_cond: np.ndarray, v_uncond: np.ndarray, w_cfg: float) -> np.ndarray:
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"conditional shape {v_cond.shape} != unconditional shape {v_uncond.shape}")
    return (1.0 + w_cfg) * v_cond - w_cfg * v_uncond


def solver_step(z: np.ndarray, field_provider, t0: float, t1: float, mode: str = "euler") -> np.ndarray:
    """One ODE step. ``field_provider(z, t, stage)`` returns the (gated) direction field.

    ``stage`` is 0 for the predictor evaluation at ``t0`` and 1 for Heun's corrector at ``t1``.
    """
    if not t1 > t0:
        raise ValueError(f"solver step needs t1 > t0, got {t0} -> {t1}")
    dt = t1 - t0
    v0 = field_provider(z, t0, 0)
    if mode == "euler":
        return z + dt * v0
    if mode == "heun":
        zp = z + dt * v0
        v1 = field_provider(zp, t1, 1)
        return z + 0.5 * dt * (v0 + v1)
    raise ValueError(f"unknown solver {mode!r}")


def head_events(head: EventHead) -> EventSource:
    return lambda final_tokens, t, z: head(final_tokens, t)


def initial_noise(shape, seeds: Sequence[int]) -> np.ndarray:
    return np.stack([np.random.default_rng(int(s)).standard_normal(shape) for s in seeds])


def split_seed(seed: int, n: int) -> list[int]:
    """Per-trajectory seeds from one run seed (``SeedSequence.spawn``, first 63 bits of each child)."""
    return [int(c.generate_state(2, np.uint64)[0] >> np.uint64(1)) for c in np.random.SeedSequence(seed).spawn(n)]


def sample(model, head, y, cfg: SamplerConfig, seed=0, *, events: EventSource | None = None,
           z0: np.ndarray | None = None, spec: PatchSpec | None = None, record: bool = True):
    """Integrate the gated, guided field from noise at ``t=0`` to ``t=1``.

    ``y`` is one embedding ``(d_y,)`` or a batch ``(B, d_y)``; ``seed`` is one
    int (a single trajectory, or split with ``split_seed`` for a batch) or a
    sequence of per-trajectory seeds. Returns ``(z_final, Trajectory)`` with a
    leading batch axis when ``y`` is batched.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    yb = y[None] if single else y
    B = yb.shape[0]
    shape = tuple(np.shape(z0)[-4:]) if z0 is not None else model.config.latent_shape
    spec = spec or getattr(model, "spec", None) or model.config.patch_spec
    if z0 is None:
        if np.ndim(seed) == 0:
            seeds = [int(seed)] if B == 1 else split_seed(int(seed), B)
        else:
            seeds = list(seed)
        z = initial_noise(shape, seeds)
    else:
        z = np.asarray(z0, dtype=np.float64).reshape((B,) + tuple(shape)).copy()
    if cfg.gating_enabled and events is None:
        if head is None:
            raise ValueError("gated sampling needs an event head or an event source")
        events = head_events(head)

    counter = EvalCounter(model)
    null = np.zeros_like(yb)
    yy = np.concatenate([yb, null])
    grid = cfg.grid()
    n_tok = spec.n_tokens(shape)
    state = GateState.zeros(n_tok, B)
    latents = [z]
    gates, acts, rhos = [], [], []

    def provider(zc, t, stage):
        nonlocal state
        v, s = counter(np.concatenate([zc, zc]), yy, t)
        v_cfg = cfg_combine(v[:B], v[B:], cfg.w_cfg)
        if not cfg.gating_enabled:
            return v_cfg
        s_ev = s[:B] if cfg.event_branch == "cond" else s[B:]
        a = np.asarray(events(s_ev, t, zc), dtype=np.float64)
        a_s = smooth_activity(a, spec, shape, cfg.gate.smoothing_enabled)
        soft = soft_gate(a_s, cfg.gate)
        if stage == 0:
            state = hysteresis_step(a_s, state, cfg.gate)
        rho = cfg.rho(t)
        g = apply_schedule(combine_gate(soft, state, cfg.gate.combine), rho)
        if stage == 0 and record:
            gates.append(g)
            acts.append(a)
        return gate_field(v_cfg, g, spec)

    for t0, t1 in grid:
        rhos.append(cfg.rho(t0) if cfg.gating_enabled else 0.0)
        z = solver_step(z, provider, t0, t1, cfg.solver)
        if record:
            latents.append(z)

    traj = Trajectory(
        times=grid.points,
        latents=np.stack(latents) if record else z[None],
        gates=np.stack(gates) if gates else None,
        activities=np.stack(acts) if acts else None,
        rho=np.asarray(rhos),
        evaluations=counter.rows // B,
    )
    if single:
        traj.latents = traj.latents[:, 0]
        if traj.gates is not None:
            traj.gates, traj.activities = traj.gates[:, 0], traj.activities[:, 0]
        return z[0], traj
    return z, traj
