"""Self-supervised event pseudo-targets from latent change.

Magnitudes are computed on spatial tokens frame by frame (the temporal patch
extent is forced to 1 here). Frame-pair index ``tau`` refers to the change
from frame ``tau`` to ``tau + 1``, so a clip of ``T`` frames yields ``T - 1``
magnitude maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gating import ConfigError
from .latent import PatchSpec, ShapeError, patchify, transitions_for_slot
from .nn import sigmoid


@dataclass(frozen=True)
class PseudoTargetConfig:
    softness: float = 0.25
    mu_mode: str = "median"
    mu_value: float = 0.0
    tau_a: float = 0.3
    entropy_threshold: float = 0.85
    eps: float = 1e-6
    use_suppressed: bool = True
    top_fraction: float = 0.2

    def __post_init__(self):
        if self.softness <= 0:
            raise ConfigError(f"pseudo.softness must be positive, got {self.softness}")
        if self.eps <= 0:
            raise ConfigError(f"pseudo.eps must be positive, got {self.eps}")
        if self.mu_mode not in ("median", "fixed"):
            raise ConfigError(f"pseudo.mu_mode must be 'median' or 'fixed', got {self.mu_mode!r}")
        if not 0.0 < self.tau_a < 1.0:
            raise ConfigError(f"pseudo.tau_a must lie in (0, 1), got {self.tau_a}")


def spatial_spec(spec: PatchSpec) -> PatchSpec:
    return PatchSpec(1, spec.ph, spec.pw)


def latent_change_magnitude(z1: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Per-token mean absolute change ``(1/C)|Tok(z[tau+1]) - Tok(z[tau])|_1``, shape ``(..., T-1, Ns)``."""
    z1 = np.asarray(z1, dtype=np.float64)
    if z1.ndim < 4:
        raise ShapeError(f"expected (..., T, H, W, C), got shape {z1.shape}")
    if z1.shape[-4] < 2:
        raise ShapeError("latent change needs at least two frames")
    c = z1.shape[-1]
    tok = patchify(z1, spatial_spec(spec))
    lead, t = z1.shape[:-4], z1.shape[-4]
    tok = tok.reshape(*lead, t, -1, tok.shape[-1])
    return np.abs(np.diff(tok, axis=-3)).sum(axis=-1) / c


def _frame_mean(m: np.ndarray) -> np.ndarray:
    # shifting by the frame minimum makes the mean of a constant frame exactly that constant
    lo = m.min(axis=-1, keepdims=True)
    return lo + (m - lo).mean(axis=-1, keepdims=True)


def suppress_camera(m: np.ndarray) -> np.ndarray:
    """Remove the frame-wise mean magnitude and clamp at zero."""
    m = np.asarray(m, dtype=np.float64)
    return np.maximum(0.0, m - _frame_mean(m))


def _mu(m: np.ndarray, cfg: PseudoTargetConfig) -> np.ndarray:
    if cfg.mu_mode == "fixed":
        return np.full(m.shape[:-1] + (1,), cfg.mu_value)
    return np.median(m, axis=-1, keepdims=True)


def activity_target(m: np.ndarray, cfg: PseudoTargetConfig = PseudoTargetConfig()) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return sigmoid((m - _mu(m, cfg)) / cfg.softness)


def activity_floor(m: np.ndarray, cfg: PseudoTargetConfig = PseudoTargetConfig()) -> np.ndarray:
    """Activity assigned to a zero magnitude in each frame, ``sigma(-mu/s)``; shape ``(..., 1)``."""
    return sigmoid(-_mu(np.asarray(m, dtype=np.float64), cfg) / cfg.softness)


def phase_target(a_star: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Cumulative activity mass over frames divided by total mass plus ``eps``."""
    mass = np.asarray(a_star, dtype=np.float64).sum(axis=-1)
    return np.cumsum(mass, axis=-1) / (mass.sum(axis=-1, keepdims=True) + eps)


def confidence_target(a_star: np.ndarray, tau_a: float = 0.3) -> np.ndarray:
    """Mean activity over tokens with ``a* >= tau_a`` (0 when none qualify), clipped to [0, 1]."""
    a = np.asarray(a_star, dtype=np.float64)
    sel = a >= tau_a
    count = sel.sum(axis=-1)
    total = np.where(sel, a, 0.0).sum(axis=-1)
    conf = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return np.clip(conf, 0.0, 1.0)


def normalized_entropy(a: np.ndarray) -> float:
    """Shannon entropy of ``a / sum(a)`` divided by ``log N``; 1.0 for an all-zero map."""
    a = np.asarray(a, dtype=np.float64).ravel()
    total = a.sum()
    if total <= 0 or a.size < 2:
        return 1.0 if total <= 0 else 0.0
    q = a[a > 0] / total
    return float(-(q * np.log(q)).sum() / math.log(a.size))


def diffuseness_filter(a: np.ndarray, threshold: float = 0.85) -> tuple[bool, float]:
    """Return ``(accept, normalized_entropy)``; diffuse or all-zero maps are rejected."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ShapeError("diffuseness filter needs a nonempty map")
    if a.sum() <= 0:
        return False, 1.0
    h = normalized_entropy(a)
    return h <= threshold, h


def clip_activity_score(z1: np.ndarray, spec: PatchSpec, top_fraction: float = 0.2) -> float:
    """Mean of the top ``ceil(top_fraction * (T-1))`` per-frame mean change magnitudes.

    Ties are broken by a stable sort on frame index.
    """
    per_frame = latent_change_magnitude(z1, spec).mean(axis=-1)
    k = max(1, math.ceil(top_fraction * per_frame.shape[-1] - 1e-12))
    order = np.argsort(-per_frame, kind="stable")
    return float(per_frame[order[:k]].mean())


def pseudo_activity(z1: np.ndarray, spec: PatchSpec, cfg: PseudoTargetConfig = PseudoTargetConfig()) -> np.ndarray:
    """Per-frame-pair activity targets ``(..., T-1, Ns)``."""
    m = latent_change_magnitude(z1, spec)
    if cfg.use_suppressed:
        m = suppress_camera(m)
    return activity_target(m, cfg)


def excess_activity(z1: np.ndarray, spec: PatchSpec, cfg: PseudoTargetConfig = PseudoTargetConfig()) -> np.ndarray:
    """Activity above each frame's zero-magnitude floor, the map used for diffuseness and confidence."""
    m = latent_change_magnitude(z1, spec)
    if cfg.use_suppressed:
        m = suppress_camera(m)
    return np.clip((activity_target(m, cfg) - activity_floor(m, cfg)) / (1.0 - activity_floor(m, cfg)), 0.0, 1.0)


def lift_to_tokens(per_pair: np.ndarray, spec: PatchSpec, frames: int) -> np.ndarray:
    """Max over the frame pairs touching each temporal patch: ``(..., T-1, Ns) -> (..., N)``."""
    gt = frames // spec.pt
    slots = []
    for s in range(gt):
        taus = transitions_for_slot(s, spec.pt, frames)
        slots.append(per_pair[..., taus, :].max(axis=-2))
    return np.concatenate(slots, axis=-1)


def token_targets(z1: np.ndarray, spec: PatchSpec, cfg: PseudoTargetConfig = PseudoTargetConfig()) -> np.ndarray:
    """Token-grid activity targets ``(..., N)`` used to supervise the event head."""
    z1 = np.asarray(z1, dtype=np.float64)
    return lift_to_tokens(excess_activity(z1, spec, cfg), spec, z1.shape[-4])


def clip_audit(z1: np.ndarray, spec: PatchSpec, cfg: PseudoTargetConfig = PseudoTargetConfig()) -> dict:
    """One audit record: activity score, confidence, entropy, accept/reject and the phase curve."""
    excess = excess_activity(z1, spec, cfg)
    accept, entropy = diffuseness_filter(excess, cfg.entropy_threshold)
    conf = confidence_target(excess, cfg.tau_a)
    active = conf > 0
    return {
        "score": clip_activity_score(z1, spec, cfg.top_fraction),
        "confidence": float(conf[active].mean()) if active.any() else 0.0,
        "entropy": entropy,
        "accept": bool(accept),
        "phase": [float(p) for p in phase_target(excess, cfg.eps)],
    }


class MotionMaskEvents:
    """Event source that reads activity off the current latent's own frame-to-frame change.

    Stands in for a learned event head: no parameters, same gate pipeline.
    """

    def __init__(self, spec: PatchSpec, cfg: PseudoTargetConfig = PseudoTargetConfig()):
        self.spec = spec
        self.cfg = cfg

    def __call__(self, final_tokens, t, z):
        z = np.asarray(z, dtype=np.float64)
        return lift_to_tokens(excess_activity(z, self.spec, self.cfg), self.spec, z.shape[-4])
