"""Causal update-energy metrics measured against ground-truth event windows.

For a sampled trajectory the per-step update is ``z_{k+1} - z_k``. Frames
are split by the scene's event window ``[tau_e, tau_s)`` into pre-event,
in-event and post-event masks; each energy is the sum over steps of the mean
squared update over the masked elements. By default only the gated phase
(steps starting at ``t_k < t_star``) is counted, which is where the event
gate acts; ``window=None`` sums over the whole trajectory.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

PHASES = ("pre", "in", "post")


def frame_masks(frames: int, event_window) -> dict[str, np.ndarray]:
    te, ts = event_window
    f = np.arange(frames)
    return {"pre": f < te, "in": (f >= te) & (f < ts), "post": f >= ts}


def step_mask(times: np.ndarray, window: float | None) -> np.ndarray:
    """Steps whose start time lies below ``window`` (all steps when ``window`` is None)."""
    starts = np.asarray(times)[:-1]
    return np.ones(starts.shape, bool) if window is None else starts < window - 1e-12


def update_energy(latents: np.ndarray, times: np.ndarray, frames_mask: np.ndarray, window: float | None) -> float:
    """Sum over selected steps of the mean squared update on the masked frames of one trajectory ``(K+1, T, H, W, C)``."""
    if not frames_mask.any():
        return 0.0
    upd = np.diff(latents, axis=0)[step_mask(times, window)][:, frames_mask]
    if upd.shape[0] == 0:
        return 0.0
    return float((upd * upd).reshape(upd.shape[0], -1).mean(axis=1).sum())


def trajectory_energies(latents, times, event_window, window: float | None) -> dict[str, float]:
    masks = frame_masks(latents.shape[1], event_window)
    return {k: update_energy(latents, times, masks[k], window) for k in PHASES}


@dataclass
class MetricsRecord:
    """Per-run aggregates (means over scenes); every value finite and the energies non-negative."""

    variant: str
    E_pre: float
    E_in: float
    E_post: float
    E_pre_full: float
    E_in_full: float
    E_post_full: float
    mse: float
    n_scenes: int
    final_base_loss: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        for k, v in self.as_dict().items():
            if k in ("variant", "final_base_loss"):
                continue
            if not math.isfinite(v) or (k.startswith("E_") and v < 0):
                raise ValueError(f"metric {k}={v} is invalid")


def summarize(variant: str, trajectories, scenes, window: float, final_base_loss: float = float("nan")) -> MetricsRecord:
    """Aggregate recorded trajectories (one per scene) into a ``MetricsRecord``."""
    acc = {f"E_{k}": [] for k in PHASES}
    acc.update({f"E_{k}_full": [] for k in PHASES})
    mse = []
    for (latents, times), scene in zip(trajectories, scenes):
        e = trajectory_energies(latents, times, scene.event_window, window)
        f = trajectory_energies(latents, times, scene.event_window, None)
        for k in PHASES:
            acc[f"E_{k}"].append(e[k])
            acc[f"E_{k}_full"].append(f[k])
        mse.append(float(np.mean((latents[-1] - scene.clean_latent) ** 2)))
    rec = MetricsRecord(variant=variant, mse=float(np.mean(mse)), n_scenes=len(mse),
                        final_base_loss=final_base_loss, **{k: float(np.mean(v)) for k, v in acc.items()})
    rec.check()
    return rec
