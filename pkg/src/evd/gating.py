"""Event gate: spatial smoothing, soft activation, hysteresis, combination and the early-step schedule.

Activity and gate vectors have shape ``(..., N)`` over the token grid of a
``PatchSpec``. A leading batch axis is allowed everywhere; each row belongs
to its own sampling trajectory and never mixes with the others.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .latent import PatchSpec, ShapeError, patchify, unpatchify
from .nn import sigmoid


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


@dataclass(frozen=True)
class GateConfig:
    beta: float = 12.0
    tau_on: float = 0.62
    tau_off: float = 0.38
    t_star: float = 0.60
    smoothing_enabled: bool = True
    combine: str = "product"

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError(f"gate.beta must be positive, got {self.beta}")
        if not 1.0 > self.tau_on > self.tau_off > 0.0:
            raise ConfigError(f"gate thresholds need 1 > tau_on > tau_off > 0, got tau_on={self.tau_on}, tau_off={self.tau_off}")
        if not 0.0 < self.t_star < 1.0:
            raise ConfigError(f"gate.t_star must lie in (0, 1), got {self.t_star}")
        if self.combine not in ("product", "binary"):
            raise ConfigError(f"gate.combine must be 'product' or 'binary', got {self.combine!r}")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.tau_on + self.tau_off)


@dataclass
class GateState:
    """Per-trajectory hysteresis memory, all zeros before the first step."""

    bin: np.ndarray

    @classmethod
    def zeros(cls, n_tokens: int, batch: int | None = None) -> "GateState":
        shape = (n_tokens,) if batch is None else (batch, n_tokens)
        return cls(np.zeros(shape))


def _grid(n: int, spec: PatchSpec, latent_shape) -> tuple[int, int, int]:
    g = spec.grid(latent_shape)
    if g[0] * g[1] * g[2] != n:
        raise ShapeError(f"activity length {n} does not match token grid {g}")
    return g


def _box3(x: np.ndarray) -> np.ndarray:
    """Sum over the in-bounds 3x3 spatial neighbourhood of the last two axes."""
    p = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)])
    h, w = x.shape[-2:]
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            out += p[..., di:di + h, dj:dj + w]
    return out


def _neighbour_counts(h: int, w: int) -> np.ndarray:
    return _box3(np.ones((h, w)))


def smooth_activity(a: np.ndarray, spec: PatchSpec, latent_shape, enabled: bool = True) -> np.ndarray:
    """3x3 spatial mean per temporal slice of the patch grid; edges average the in-bounds cells."""
    a = np.asarray(a, dtype=np.float64)
    if not enabled:
        return a
    gt, gh, gw = _grid(a.shape[-1], spec, latent_shape)
    x = a.reshape(*a.shape[:-1], gt, gh, gw)
    return (_box3(x) / _neighbour_counts(gh, gw)).reshape(a.shape)


def smooth_activity_adjoint(g: np.ndarray, spec: PatchSpec, latent_shape, enabled: bool = True) -> np.ndarray:
    """Transpose of ``smooth_activity`` (it is linear), for backpropagation."""
    g = np.asarray(g, dtype=np.float64)
    if not enabled:
        return g
    gt, gh, gw = _grid(g.shape[-1], spec, latent_shape)
    x = g.reshape(*g.shape[:-1], gt, gh, gw)
    return _box3(x / _neighbour_counts(gh, gw)).reshape(g.shape)


def soft_gate(a_smoothed: np.ndarray, cfg: GateConfig) -> np.ndarray:
    return sigmoid(cfg.beta * (np.asarray(a_smoothed, dtype=np.float64) - cfg.midpoint))


def hysteresis_step(a_smoothed: np.ndarray, state: GateState, cfg: GateConfig) -> GateState:
    a = np.asarray(a_smoothed, dtype=np.float64)
    if a.shape != state.bin.shape:
        raise ShapeError(f"activity shape {a.shape} != gate state shape {state.bin.shape}")
    new = np.where(a >= cfg.tau_on, 1.0, np.where(a <= cfg.tau_off, 0.0, state.bin))
    return GateState(new)


def combine_gate(soft: np.ndarray, state: GateState, mode: str = "product") -> np.ndarray:
    soft = np.asarray(soft, dtype=np.float64)
    if soft.shape != state.bin.shape:
        raise ShapeError(f"soft gate shape {soft.shape} != gate state shape {state.bin.shape}")
    if mode == "binary":
        return state.bin.copy()
    return soft * state.bin


def schedule_rho(t: float, cfg: GateConfig) -> float:
    if t <= cfg.t_star:
        return 1.0
    return 1.0 - (t - cfg.t_star) / (1.0 - cfg.t_star)


def apply_schedule(gate: np.ndarray, rho: float) -> np.ndarray:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"schedule factor must lie in [0, 1], got {rho}")
    return rho * np.asarray(gate, dtype=np.float64) + (1.0 - rho)


def gate_field(v: np.ndarray, gate: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Scale each token of ``v`` by its gate entry and map back to latent layout."""
    v = np.asarray(v, dtype=np.float64)
    tok = patchify(v, spec)
    gate = np.asarray(gate, dtype=np.float64)
    if gate.shape != tok.shape[:-1]:
        raise ShapeError(f"gate shape {gate.shape} != token grid {tok.shape[:-1]}")
    return unpatchify(gate[..., None] * tok, spec, v.shape[-4:])
