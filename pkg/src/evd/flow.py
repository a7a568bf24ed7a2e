"""Linear flow-matching path, sampling time grids and the auxiliary-loss time weight."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .latent import ShapeError


@dataclass
class FlowSample:
    z0: np.ndarray
    z1: np.ndarray
    t: float
    z_t: np.ndarray
    v_t: np.ndarray


def interpolate(z0: np.ndarray, z1: np.ndarray, t: float) -> FlowSample:
    """``z_t = t z1 + (1 - t) z0`` with constant velocity ``z1 - z0``."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ShapeError(f"noise shape {z0.shape} != clean shape {z1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    return FlowSample(z0=z0, z1=z1, t=float(t), z_t=t * z1 + (1.0 - t) * z0, v_t=z1 - z0)


@dataclass(frozen=True)
class TimeGrid:
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 1 or len(p) < 2:
            raise ValueError("time grid needs at least two points")
        if p[0] != 0.0 or p[-1] != 1.0:
            raise ValueError("time grid must start at 0 and end at 1")
        if np.any(np.diff(p) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "points", p)

    @property
    def K(self) -> int:
        return len(self.points) - 1

    def __iter__(self):
        return iter(zip(self.points[:-1], self.points[1:]))


def uniform_time_grid(K: int) -> TimeGrid:
    if K < 1:
        raise ValueError(f"step count K must be >= 1, got {K}")
    pts = np.arange(K + 1, dtype=np.float64) / K
    return TimeGrid(pts)


@dataclass(frozen=True)
class TimeWeightConfig:
    t_star_loss: float = 0.60
    kappa: float = 6.0

    def __post_init__(self):
        if not 0.0 < self.t_star_loss < 1.0:
            raise ValueError("t_star_loss must lie in (0, 1)")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


def time_weight(t: float, cfg: TimeWeightConfig = TimeWeightConfig()) -> float:
    if t <= cfg.t_star_loss:
        return 1.0
    return math.exp(-cfg.kappa * (t - cfg.t_star_loss))
