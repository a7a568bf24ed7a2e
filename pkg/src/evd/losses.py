"""Event-grounded flow-matching losses.

Every squared norm is mean-reduced over all elements (and the batch), so the
loss weights are comparable across latent sizes. Each ``*_grad`` companion
returns the gradients of the corresponding loss with respect to its array
inputs; activities have shape ``(..., N)`` and token updates ``(..., N, D)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import TimeWeightConfig, time_weight
from .gating import ConfigError
from .latent import ShapeError
from .nn import sigmoid


@dataclass(frozen=True)
class LossConfig:
    lambda_real: float = 0.12
    lambda_cons: float = 0.08
    lambda_order: float = 0.03
    time_weight: TimeWeightConfig = field(default_factory=TimeWeightConfig)
    delta_jitter: float = 0.05
    p_event_dropout: float = 0.25
    tau_on: float = 0.62
    tau_off: float = 0.38
    use_smoothed_activity_in_losses: bool = True
    smoothing_enabled: bool = True
    lambda_event: float = 0.0
    confidence_weighting: bool = False

    def __post_init__(self):
        for name in ("lambda_real", "lambda_cons", "lambda_order", "lambda_event"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be non-negative, got {getattr(self, name)}")
        if not 1.0 > self.tau_on > self.tau_off > 0.0:
            raise ConfigError(f"loss thresholds need 1 > tau_on > tau_off > 0, got tau_on={self.tau_on}, tau_off={self.tau_off}")
        if not 0.0 < self.delta_jitter < 1.0:
            raise ConfigError(f"loss.delta_jitter must lie in (0, 1), got {self.delta_jitter}")
        if not 0.0 <= self.p_event_dropout <= 1.0:
            raise ConfigError(f"loss.p_event_dropout must lie in [0, 1], got {self.p_event_dropout}")


@dataclass
class LossBreakdown:
    base: float
    real: float
    cons: float
    order: float
    weight: float
    total: float
    event: float = 0.0

    def as_dict(self) -> dict:
        return {"base": self.base, "real": self.real, "cons": self.cons, "order": self.order,
                "event": self.event, "weight": self.weight, "total": self.total}


def _check(a, delta):
    if a.shape != delta.shape[:-1]:
        raise ShapeError(f"activity shape {a.shape} does not match token field {delta.shape}")


def loss_base(v_hat, z0, z1) -> float:
    v_hat, z0, z1 = (np.asarray(a, dtype=np.float64) for a in (v_hat, z0, z1))
    if not v_hat.shape == z0.shape == z1.shape:
        raise ShapeError(f"shape mismatch: v_hat {v_hat.shape}, z0 {z0.shape}, z1 {z1.shape}")
    r = v_hat - (z1 - z0)
    return float((r * r).mean())


def loss_base_grad(v_hat, z0, z1) -> np.ndarray:
    r = np.asarray(v_hat) - (np.asarray(z1) - np.asarray(z0))
    return 2.0 * r / r.size


def loss_real(activity, delta) -> float:
    a, delta = np.asarray(activity, float), np.asarray(delta, float)
    _check(a, delta)
    r = (1.0 - a)[..., None] * delta
    return float((r * r).mean())


def loss_real_grad(activity, delta):
    """Returns ``(d activity, d delta)``."""
    a, delta = np.asarray(activity, float), np.asarray(delta, float)
    k = 1.0 - a
    d_delta = 2.0 * (k * k)[..., None] * delta / delta.size
    d_a = -2.0 * (k[..., None] * delta * delta).sum(axis=-1) / delta.size
    return d_a, d_delta


def loss_cons(a1, d1, a2, d2) -> float:
    a1, d1, a2, d2 = (np.asarray(x, float) for x in (a1, d1, a2, d2))
    _check(a1, d1)
    _check(a2, d2)
    if d1.shape != d2.shape:
        raise ShapeError(f"token fields differ: {d1.shape} vs {d2.shape}")
    r = a1[..., None] * d1 - a2[..., None] * d2
    return float((r * r).mean())


def loss_cons_grad(a1, d1, a2, d2):
    """Returns ``(d a1, d d1, d a2, d d2)``."""
    a1, d1, a2, d2 = (np.asarray(x, float) for x in (a1, d1, a2, d2))
    r = 2.0 * (a1[..., None] * d1 - a2[..., None] * d2) / d1.size
    return (r * d1).sum(-1), r * a1[..., None], -(r * d2).sum(-1), -r * a2[..., None]


def loss_order(activity, delta, tau_on: float, tau_off: float) -> float:
    """Hard-indicator penalty; tokens below ``tau_off`` are counted in both terms."""
    a, delta = np.asarray(activity, float), np.asarray(delta, float)
    _check(a, delta)
    if not tau_on > tau_off:
        raise ConfigError(f"tau_on ({tau_on}) must exceed tau_off ({tau_off})")
    e = delta * delta
    on = (a < tau_on)[..., None]
    off = (a < tau_off)[..., None]
    return float((on * e).mean() + (off * e).mean())


def loss_order_grad(activity, delta, tau_on: float, tau_off: float) -> np.ndarray:
    a, delta = np.asarray(activity, float), np.asarray(delta, float)
    mask = (a < tau_on).astype(float) + (a < tau_off).astype(float)
    return 2.0 * mask[..., None] * delta / delta.size


def loss_event(logits, target) -> float:
    """Binary cross-entropy between activity logits and pseudo-activity targets."""
    x, y = np.asarray(logits, float), np.asarray(target, float)
    return float((np.logaddexp(0.0, x) - y * x).mean())


def loss_event_grad(logits, target) -> np.ndarray:
    x = np.asarray(logits, float)
    return (sigmoid(x) - np.asarray(target, float)) / x.size


def loss_total(parts: dict, t: float, cfg: LossConfig = LossConfig(), scale: float = 1.0) -> LossBreakdown:
    """Combine per-term values: ``base + scale * w(t) * (weighted auxiliaries) + lambda_event * event``.

    ``scale`` is the optional confidence multiplier on the auxiliary block (1 by default).
    """
    w = time_weight(t, cfg.time_weight)
    base, real, cons, order = (float(parts.get(k, 0.0)) for k in ("base", "real", "cons", "order"))
    event = float(parts.get("event", 0.0))
    aux = cfg.lambda_real * real + cfg.lambda_cons * cons + cfg.lambda_order * order
    total = base + scale * w * aux
    if cfg.lambda_event:
        total += cfg.lambda_event * event
    return LossBreakdown(base=base, real=real, cons=cons, order=order, weight=w, total=total, event=event)
