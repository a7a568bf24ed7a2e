"""Training: the event-grounded objective with its gradients, AdamW, clipping, EMA and the step loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import EventHead, MicroDiT
from .gating import ConfigError, smooth_activity, smooth_activity_adjoint
from .latent import ShapeError, patchify, unpatchify
from .losses import (
    LossBreakdown, LossConfig, loss_base, loss_base_grad, loss_cons, loss_cons_grad, loss_event,
    loss_event_grad, loss_order, loss_order_grad, loss_real, loss_real_grad, loss_total,
)
from .nn import sigmoid
from .pseudo import PseudoTargetConfig, confidence_target, excess_activity, token_targets

GRAD_GROUPS = ("backbone", "head")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_backbone: float = 1e-3
    lr_event: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.02
    eps: float = 1e-8
    grad_clip: float = 0.5
    ema_decay: float = 0.999
    warmup_steps: int = 100
    p_uncond: float = 0.1
    seed: int = 0
    freeze_backbone: bool = False
    freeze_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        for name in ("steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_backbone", "lr_event", "grad_clip", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be non-negative, got {self.weight_decay}")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"train.betas must be two values in [0, 1), got {self.betas}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"train.ema_decay must lie in [0, 1], got {self.ema_decay}")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError(f"train.p_uncond must lie in [0, 1], got {self.p_uncond}")
        if self.warmup_steps < 0:
            raise ConfigError(f"train.warmup_steps must be non-negative, got {self.warmup_steps}")


@dataclass
class Batch:
    """Clean latents ``(B, T, H, W, C)``, prompts ``(B, d_y)`` and optional token pseudo-targets ``(B, N)``."""

    z1: np.ndarray
    y: np.ndarray
    targets: np.ndarray | None = None
    confidence: float | None = None


@dataclass
class Draws:
    """All randomness of one step, drawn in this order: noise, t, jitter, dropout, prompt dropout."""

    z0: np.ndarray
    t: float
    t2: float
    drop: np.ndarray
    uncond: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator, batch: int, shape, loss_cfg: LossConfig, p_uncond: float) -> "Draws":
        z0 = rng.standard_normal((batch,) + tuple(shape))
        t = float(rng.uniform(0.0, 1.0))
        delta = float(rng.uniform(-loss_cfg.delta_jitter, loss_cfg.delta_jitter))
        drop = rng.uniform(size=batch) < loss_cfg.p_event_dropout
        uncond = rng.uniform(size=batch) < p_uncond
        return cls(z0=z0, t=t, t2=min(1.0, max(0.0, t + delta)), drop=drop, uncond=uncond)


def batch_confidence(z1: np.ndarray, spec, cfg: PseudoTargetConfig = PseudoTargetConfig()) -> float:
    """Batch mean of per-clip pseudo confidence (frames with no selected tokens are skipped)."""
    conf = confidence_target(excess_activity(z1, spec, cfg), cfg.tau_a)
    per_clip = [c[c > 0].mean() if (c > 0).any() else 0.0 for c in conf.reshape(-1, conf.shape[-1])]
    return float(np.mean(per_clip))


def _event_pass(model, head, z, y, t, drop, cfg: LossConfig, need_cache: bool):
    v, s, cache = model.forward(z, y, t, keep_cache=need_cache)
    logit, hcache = head.logits(s, t, keep_cache=need_cache)
    a_raw = sigmoid(logit)
    a = np.where(drop[:, None], 0.0, a_raw)
    smooth = cfg.use_smoothed_activity_in_losses and cfg.smoothing_enabled
    a_used = smooth_activity(a, model.spec, model.config.latent_shape, smooth)
    return dict(v=v, s=s, cache=cache, logit=logit, hcache=hcache, a_raw=a_raw, a=a_used,
                delta=patchify(v, model.spec), smooth=smooth)


def evd_objective(model: MicroDiT, head: EventHead, batch: Batch, draws: Draws, cfg: LossConfig = LossConfig(),
                  need_grads: bool = True, backbone_grads: bool = True):
    """Evaluate the full objective and (optionally) its gradients for both parameter groups.

    Returns ``(LossBreakdown, {"backbone": grads | None, "head": grads})``.
    """
    z1 = np.asarray(batch.z1, dtype=np.float64)
    if z1.ndim != 5:
        raise ShapeError(f"training batch must be (B, T, H, W, C), got {z1.shape}")
    B = z1.shape[0]
    z0 = draws.z0
    y = np.where(draws.uncond[:, None], 0.0, np.asarray(batch.y, dtype=np.float64))
    lam_aux = cfg.lambda_real or cfg.lambda_cons or cfg.lambda_order
    scale = batch.confidence if (cfg.confidence_weighting and batch.confidence is not None) else 1.0

    p1 = _event_pass(model, head, draws.t * z1 + (1 - draws.t) * z0, y, draws.t, draws.drop, cfg, need_grads)
    parts = {
        "base": loss_base(p1["v"], z0, z1),
        "real": loss_real(p1["a"], p1["delta"]),
        "order": loss_order(p1["a"], p1["delta"], cfg.tau_on, cfg.tau_off),
    }
    p2 = None
    if cfg.lambda_cons:
        p2 = _event_pass(model, head, draws.t2 * z1 + (1 - draws.t2) * z0, y, draws.t2, draws.drop, cfg, need_grads)
        parts["cons"] = loss_cons(p1["a"], p1["delta"], p2["a"], p2["delta"])
    if cfg.lambda_event and batch.targets is not None:
        parts["event"] = loss_event(p1["logit"], batch.targets)
    out = loss_total(parts, draws.t, cfg, scale)
    if not need_grads:
        return out, None

    shape, spec = model.config.latent_shape, model.spec
    c = scale * out.weight
    d_delta1 = np.zeros_like(p1["delta"])
    d_a1 = np.zeros_like(p1["a"])
    if lam_aux:
        da, dd = loss_real_grad(p1["a"], p1["delta"])
        d_a1 += c * cfg.lambda_real * da
        d_delta1 += c * cfg.lambda_real * dd
        d_delta1 += c * cfg.lambda_order * loss_order_grad(p1["a"], p1["delta"], cfg.tau_on, cfg.tau_off)
    passes = [(p1, d_a1, d_delta1)]
    if p2 is not None:
        da1, dd1, da2, dd2 = loss_cons_grad(p1["a"], p1["delta"], p2["a"], p2["delta"])
        d_a1 += c * cfg.lambda_cons * da1
        d_delta1 += c * cfg.lambda_cons * dd1
        passes.append((p2, c * cfg.lambda_cons * da2, c * cfg.lambda_cons * dd2))

    grads = {"backbone": None, "head": None}
    for k, (p, d_a, d_delta) in enumerate(passes):
        d_araw = smooth_activity_adjoint(d_a, spec, shape, p["smooth"])
        d_araw = np.where(draws.drop[:, None], 0.0, d_araw)
        d_logit = d_araw * p["a_raw"] * (1.0 - p["a_raw"])
        if k == 0 and "event" in parts:
            d_logit = d_logit + cfg.lambda_event * loss_event_grad(p["logit"], batch.targets)
        ds, gh = head.backward(p["hcache"], d_logit)
        grads["head"] = gh if grads["head"] is None else {n: grads["head"][n] + g for n, g in gh.items()}
        if backbone_grads:
            dv = unpatchify(d_delta, spec, shape)
            if k == 0:
                dv = dv + loss_base_grad(p["v"], z0, z1)
            gb = model.backward(p["cache"], dv, ds)
            grads["backbone"] = gb if grads["backbone"] is None else {n: grads["backbone"][n] + g for n, g in gb.items()}
    return out, grads


# --------------------------------------------------------------------------
# Optimizer utilities
# --------------------------------------------------------------------------

def global_norm(grads: list[dict[str, np.ndarray]]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for group in grads for g in group.values()))


def clip_global_norm(grads: list[dict[str, np.ndarray]], max_norm: float) -> tuple[list[dict[str, np.ndarray]], float]:
    """Scale every gradient by ``max_norm / norm`` when the joint norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    s = max_norm / norm
    return [{k: g * s for k, g in group.items()} for group in grads], norm


def ema_update(ema: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> None:
    for k, p in params.items():
        ema[k] *= decay
        ema[k] += (1.0 - decay) * p


def ema_decay_at(step: int, decay: float) -> float:
    """EMA decay with the usual warm-up ``min(decay, (1 + n) / (10 + n))`` so short runs are not dominated by the init."""
    return min(decay, (1.0 + step) / (10.0 + step))


def lr_factor(step: int, warmup: int, total: int) -> float:
    """Linear warmup over ``warmup`` steps, then cosine decay to zero at ``total``."""
    if warmup and step < warmup:
        return (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only (ndim >= 2)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.98), weight_decay: float = 0.0,
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.betas
        lr = self.lr * lr_scale
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p -= lr * self.weight_decay * p
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class StepRecord:
    step: int
    t: float
    losses: LossBreakdown
    grad_norm: float
    lr_scale: float

    def as_dict(self) -> dict:
        return {"step": self.step, "t": self.t, **self.losses.as_dict(), "grad_norm": self.grad_norm,
                "lr_scale": self.lr_scale}


class Trainer:
    """Owns the parameter groups, optimizer states, EMA copies and the step RNG."""

    def __init__(self, model: MicroDiT, head: EventHead, loss_cfg: LossConfig = LossConfig(),
                 cfg: TrainConfig = TrainConfig(), pseudo_cfg: PseudoTargetConfig = PseudoTargetConfig()):
        self.model, self.head = model, head
        self.loss_cfg, self.cfg, self.pseudo_cfg = loss_cfg, cfg, pseudo_cfg
        self.opt_backbone = AdamW(model.params, cfg.lr_backbone, cfg.betas, cfg.weight_decay, cfg.eps)
        self.opt_head = AdamW(head.params, cfg.lr_event, cfg.betas, cfg.weight_decay, cfg.eps)
        self.ema_backbone = {k: p.copy() for k, p in model.params.items()}
        self.ema_head = {k: p.copy() for k, p in head.params.items()}
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        self.rng = np.random.default_rng(seeds[0])
        self.data_rng = np.random.default_rng(seeds[1])
        self.step_count = 0

    def prepare(self, z1: np.ndarray, y: np.ndarray) -> Batch:
        """Attach pseudo-targets and confidence when the loss config uses them."""
        spec = self.model.spec
        targets = token_targets(z1, spec, self.pseudo_cfg) if self.loss_cfg.lambda_event else None
        conf = batch_confidence(z1, spec, self.pseudo_cfg) if self.loss_cfg.confidence_weighting else None
        return Batch(z1=z1, y=y, targets=targets, confidence=conf)

    def train_step(self, batch: Batch, draws: Draws | None = None) -> StepRecord:
        cfg = self.cfg
        B = batch.z1.shape[0]
        if draws is None:
            draws = Draws.sample(self.rng, B, self.model.config.latent_shape, self.loss_cfg, cfg.p_uncond)
        out, grads = evd_objective(self.model, self.head, batch, draws, self.loss_cfg,
                                   backbone_grads=not cfg.freeze_backbone)
        for name, value in out.as_dict().items():
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite {name} loss ({value}) at step {self.step_count}")
        active = [g for g, frozen in ((grads["backbone"], cfg.freeze_backbone), (grads["head"], cfg.freeze_head))
                  if not frozen]
        clipped, norm = clip_global_norm(active, cfg.grad_clip)
        if not math.isfinite(norm):
            raise FloatingPointError(f"non-finite gradient norm at step {self.step_count}")
        scale = lr_factor(self.step_count, cfg.warmup_steps, cfg.steps)
        it = iter(clipped)
        if not cfg.freeze_backbone:
            self.opt_backbone.step(next(it), scale)
            ema_update(self.ema_backbone, self.model.params, ema_decay_at(self.step_count, cfg.ema_decay))
        if not cfg.freeze_head:
            self.opt_head.step(next(it), scale)
            ema_update(self.ema_head, self.head.params, ema_decay_at(self.step_count, cfg.ema_decay))
        rec = StepRecord(self.step_count, draws.t, out, norm, scale)
        self.step_count += 1
        return rec

    def fit(self, z1: np.ndarray, y: np.ndarray, steps: int | None = None, log=None) -> list[StepRecord]:
        """Train on a fixed dataset with minibatches drawn with replacement from the data stream."""
        z1, y = np.asarray(z1, dtype=np.float64), np.asarray(y, dtype=np.float64)
        targets = token_targets(z1, self.model.spec, self.pseudo_cfg) if self.loss_cfg.lambda_event else None
        records = []
        for _ in range(self.cfg.steps if steps is None else steps):
            idx = self.data_rng.integers(0, z1.shape[0], size=self.cfg.batch_size)
            conf = (batch_confidence(z1[idx], self.model.spec, self.pseudo_cfg)
                    if self.loss_cfg.confidence_weighting else None)
            batch = Batch(z1[idx], y[idx], None if targets is None else targets[idx], conf)
            rec = self.train_step(batch)
            records.append(rec)
            if log is not None:
                log(rec)
        return records

    def ema_models(self) -> tuple[MicroDiT, EventHead]:
        """Copies of the model and head carrying the EMA parameters."""
        m = MicroDiT(self.model.config)
        h = EventHead(self.head.width, self.head.hidden)
        for k in m.params:
            m.params[k][...] = self.ema_backbone[k]
        for k in h.params:
            h.params[k][...] = self.ema_head[k]
        return m, h
