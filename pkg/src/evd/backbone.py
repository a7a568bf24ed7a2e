"""Velocity-field backbones: a micro diffusion transformer, the event head, and oracle fields.

Parameters live in flat ``{name: ndarray}`` stores so the optimizer, EMA,
checkpoints and finite-difference checks can all address them uniformly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import nn
from .latent import PatchSpec, ShapeError, patchify, unpatchify

ACTIVITY_INIT_BIAS = -6.0


@dataclass(frozen=True)
class Conditioning:
    """Prompt embedding ``y``; the null prompt is the all-zero embedding with ``is_null`` set."""

    embedding: np.ndarray
    is_null: bool = False

    @classmethod
    def null(cls, width: int) -> "Conditioning":
        return cls(np.zeros(width), True)

    def array(self) -> np.ndarray:
        return np.zeros_like(self.embedding, dtype=np.float64) if self.is_null else np.asarray(self.embedding, float)


class VelocityField(Protocol):
    def __call__(self, z_t: np.ndarray, y, t) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class ModelConfig:
    latent_shape: tuple[int, int, int, int] = (16, 8, 8, 4)
    patch: tuple[int, int, int] = (2, 2, 2)
    width: int = 32
    depth: int = 2
    heads: int = 4
    cond_dim: int = 8
    mlp_ratio: int = 4
    head_hidden: int = 32

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(*self.patch)

    @property
    def n_tokens(self) -> int:
        return self.patch_spec.n_tokens(self.latent_shape)

    @property
    def token_dim(self) -> int:
        return self.patch_spec.token_dim(self.latent_shape)

    def __post_init__(self):
        object.__setattr__(self, "latent_shape", tuple(self.latent_shape))
        object.__setattr__(self, "patch", tuple(self.patch))
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        self.patch_spec.grid(self.latent_shape)


def _cond_array(y, batch: int, width: int) -> np.ndarray:
    if isinstance(y, Conditioning):
        y = y.array()
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = np.broadcast_to(y, (batch, y.shape[0]))
    if y.shape != (batch, width):
        raise ShapeError(f"conditioning shape {y.shape} != {(batch, width)}")
    return y


def _time_array(t, batch: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.full(batch, float(t)) if t.ndim == 0 else t.reshape(batch)


class MicroDiT:
    """Pre-norm transformer over patch tokens predicting the flow velocity.

    Tokens receive a patch embedding, a learned positional embedding, a
    projected sinusoidal time embedding and a projected conditioning vector,
    all added; ``depth`` blocks of full self-attention plus a GELU MLP follow,
    then a final LayerNorm (whose output is exposed as ``final_tokens``) and
    a linear projection back to token width.
    """

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        c = config
        d, D, N = c.width, c.token_dim, c.n_tokens
        shapes = {
            "patch_in.W": (D, d), "patch_in.b": (d,), "pos": (N, d),
            "time.W": (d, d), "time.b": (d,), "cond.W": (c.cond_dim, d),
        }
        for l in range(c.depth):
            p = f"blocks.{l}."
            shapes.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "attn.qkv.W": (d, 3 * d), p + "attn.qkv.b": (3 * d,),
                p + "attn.out.W": (d, d), p + "attn.out.b": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "mlp.fc1.W": (d, c.mlp_ratio * d), p + "mlp.fc1.b": (c.mlp_ratio * d,),
                p + "mlp.fc2.W": (c.mlp_ratio * d, d), p + "mlp.fc2.b": (d,),
            })
        shapes.update({"final_ln.g": (d,), "final_ln.b": (d,), "out.W": (d, D), "out.b": (D,)})
        self.params: dict[str, np.ndarray] = {k: np.zeros(s) for k, s in shapes.items()}

    @property
    def spec(self) -> PatchSpec:
        return self.config.patch_spec

    def __call__(self, z_t, y, t):
        v, s, _ = self.forward(z_t, y, t, keep_cache=False)
        return v, s

    def forward(self, z_t, y, t, keep_cache: bool = True):
        c, P = self.config, self.params
        z = np.asarray(z_t, dtype=np.float64)
        single = z.ndim == 4
        if single:
            z = z[None]
        if z.shape[1:] != c.latent_shape:
            raise ShapeError(f"latent shape {z.shape[1:]} != configured {c.latent_shape}")
        B = z.shape[0]
        yb = _cond_array(y, B, c.cond_dim)
        tb = _time_array(t, B)

        tok = patchify(z, self.spec)
        gamma = nn.timestep_embedding(tb, c.width)
        temb = gamma @ P["time.W"] + P["time.b"]
        h = tok @ P["patch_in.W"] + P["patch_in.b"] + P["pos"] + (temb + yb @ P["cond.W"])[:, None, :]
        caches = []
        for l in range(c.depth):
            p = f"blocks.{l}."
            a, ln1 = nn.layernorm_fwd(h, P[p + "ln1.g"], P[p + "ln1.b"])
            att, attc = nn.attention_fwd(a, P[p + "attn.qkv.W"], P[p + "attn.qkv.b"],
                                         P[p + "attn.out.W"], P[p + "attn.out.b"], c.heads)
            h = h + att
            m, ln2 = nn.layernorm_fwd(h, P[p + "ln2.g"], P[p + "ln2.b"])
            f1 = m @ P[p + "mlp.fc1.W"] + P[p + "mlp.fc1.b"]
            g1, gc = nn.gelu_fwd(f1)
            h = h + g1 @ P[p + "mlp.fc2.W"] + P[p + "mlp.fc2.b"]
            caches.append((ln1, attc, ln2, m, gc, g1))
        s, lnf = nn.layernorm_fwd(h, P["final_ln.g"], P["final_ln.b"])
        out = s @ P["out.W"] + P["out.b"]
        v = unpatchify(out, self.spec, c.latent_shape)
        if single:
            v, s = v[0], s[0]
        cache = (tok, gamma, yb, caches, lnf, s if not single else s[None], single) if keep_cache else None
        return v, s, cache

    def backward(self, cache, dv=None, ds=None) -> dict[str, np.ndarray]:
        """Parameter gradients given upstream gradients on ``v_hat`` and/or ``final_tokens``."""
        c, P = self.config, self.params
        tok, gamma, yb, caches, lnf, s, single = cache
        B, N = tok.shape[:2]
        g = {k: np.zeros_like(v) for k, v in P.items()}
        dsum = np.zeros_like(s)
        if dv is not None:
            dv = np.asarray(dv)[None] if single else np.asarray(dv)
            dout = patchify(dv, self.spec)
            dsum += dout @ P["out.W"].T
            g["out.W"] = s.reshape(-1, c.width).T @ dout.reshape(-1, dout.shape[-1])
            g["out.b"] = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        if ds is not None:
            dsum += np.asarray(ds)[None] if single else ds
        dh, g["final_ln.g"], g["final_ln.b"] = nn.layernorm_bwd(lnf, dsum)
        for l in reversed(range(c.depth)):
            p = f"blocks.{l}."
            ln1, attc, ln2, m, gc, g1 = caches[l]
            # MLP residual branch
            dg1, g[p + "mlp.fc2.W"], g[p + "mlp.fc2.b"] = nn.linear_bwd(g1, P[p + "mlp.fc2.W"], dh)
            df1 = nn.gelu_bwd(gc, dg1)
            dm, g[p + "mlp.fc1.W"], g[p + "mlp.fc1.b"] = nn.linear_bwd(m, P[p + "mlp.fc1.W"], df1)
            dx, g[p + "ln2.g"], g[p + "ln2.b"] = nn.layernorm_bwd(ln2, dm)
            dh = dh + dx
            # attention residual branch
            da, g[p + "attn.qkv.W"], g[p + "attn.qkv.b"], g[p + "attn.out.W"], g[p + "attn.out.b"] = \
                nn.attention_bwd(attc, P[p + "attn.qkv.W"], P[p + "attn.out.W"], dh)
            dx, g[p + "ln1.g"], g[p + "ln1.b"] = nn.layernorm_bwd(ln1, da)
            dh = dh + dx
        g["pos"] = dh.sum(axis=0)
        g["patch_in.b"] = dh.reshape(-1, c.width).sum(axis=0)
        g["patch_in.W"] = tok.reshape(-1, tok.shape[-1]).T @ dh.reshape(-1, c.width)
        dvec = dh.sum(axis=1)
        g["time.W"] = gamma.T @ dvec
        g["time.b"] = dvec.sum(axis=0)
        g["cond.W"] = yb.T @ dvec
        return g


class EventHead:
    """Two-layer MLP on ``[final_tokens ; gamma(t)]`` producing one activity logit per token."""

    def __init__(self, width: int = 32, hidden: int = 32):
        self.width = width
        self.hidden = hidden
        self.params = {
            "fc1.W": np.zeros((2 * width, hidden)), "fc1.b": np.zeros(hidden),
            "fc2.W": np.zeros((hidden, 1)), "fc2.b": np.zeros(1),
        }

    def logits(self, final_tokens, t, keep_cache: bool = False):
        P = self.params
        s = np.asarray(final_tokens, dtype=np.float64)
        single = s.ndim == 2
        if single:
            s = s[None]
        if s.shape[-1] != self.width:
            raise ShapeError(f"token width {s.shape[-1]} != event head width {self.width}")
        B, N, _ = s.shape
        gamma = nn.timestep_embedding(_time_array(t, B), self.width)
        x = np.concatenate([s, np.broadcast_to(gamma[:, None, :], (B, N, self.width))], axis=-1)
        f1 = x @ P["fc1.W"] + P["fc1.b"]
        h, gc = nn.gelu_fwd(f1)
        e = h @ P["fc2.W"] + P["fc2.b"]
        logit = e[..., 0]
        if single:
            logit = logit[0]
        cache = (x, gc, h, single) if keep_cache else None
        return logit, cache

    def __call__(self, final_tokens, t):
        return nn.sigmoid(self.logits(final_tokens, t)[0])

    def backward(self, cache, dlogit):
        """Returns ``(d final_tokens, param grads)`` for an upstream gradient on the logits."""
        P = self.params
        x, gc, h, single = cache
        dlogit = np.asarray(dlogit)
        de = (dlogit[None] if single else dlogit)[..., None]
        g = {}
        dh, g["fc2.W"], g["fc2.b"] = nn.linear_bwd(h, P["fc2.W"], de)
        df1 = nn.gelu_bwd(gc, dh)
        dx, g["fc1.W"], g["fc1.b"] = nn.linear_bwd(x, P["fc1.W"], df1)
        ds = dx[..., :self.width]
        return (ds[0] if single else ds), g


def event_head_forward(head: EventHead, final_tokens, t) -> np.ndarray:
    return head(final_tokens, t)


def _random_fill(params: dict, rng: np.random.Generator, skip=()) -> None:
    for name, p in params.items():
        if name in skip:
            continue
        if name.endswith(".g"):
            p[...] = 1.0
        elif p.ndim == 2 and name != "pos":
            p[...] = rng.normal(0.0, 1.0 / np.sqrt(p.shape[0]), p.shape)
        elif name == "pos":
            p[...] = rng.normal(0.0, 0.5, p.shape)
        else:
            p[...] = 0.0


def init_zero_impact(model: MicroDiT, head: EventHead, seed: int) -> None:
    """Seeded init with a silent output projection and an event head pinned near zero activity."""
    rng = np.random.default_rng(seed)
    _random_fill(model.params, rng)
    _random_fill(head.params, rng)
    model.params["out.W"][...] = 0.0
    model.params["out.b"][...] = 0.0
    head.params["fc2.W"][...] = 0.0
    head.params["fc2.b"][...] = ACTIVITY_INIT_BIAS


def init_random(model: MicroDiT, head: EventHead, seed: int, scale: float = 1.0) -> None:
    """Fully random parameters (every gradient nonzero); used for derivative checks."""
    rng = np.random.default_rng(seed)
    for params in (model.params, head.params):
        for name, p in params.items():
            p[...] = rng.normal(0.0, scale / np.sqrt(p.shape[0] if p.ndim == 2 else 4.0), p.shape)
            if name.endswith(".g"):
                p += 1.0


class OracleField:
    """Velocity field that returns ``z1 - z0`` whatever the state, prompt or time."""

    def __init__(self, z0, z1, spec: PatchSpec):
        z0, z1 = np.asarray(z0, float), np.asarray(z1, float)
        if z0.shape != z1.shape:
            raise ShapeError(f"noise shape {z0.shape} != clean shape {z1.shape}")
        self.velocity = z1 - z0
        self.spec = spec

    def __call__(self, z_t, y, t):
        z_t = np.asarray(z_t)
        v = np.broadcast_to(self.velocity, z_t.shape).copy()
        return v, patchify(v, self.spec)


def oracle_velocity_field(z0, z1, spec: PatchSpec = PatchSpec()) -> OracleField:
    return OracleField(z0, z1, spec)


# --------------------------------------------------------------------------
# Parameter checkpoints (layout documented in docs/formats.md)
# --------------------------------------------------------------------------

def save_params(path, groups: dict[str, dict[str, np.ndarray]], config: dict | None = None) -> None:
    """Write named f64 arrays to ``path`` (raw little-endian) and a JSON manifest beside it."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for group, params in groups.items():
        for name, arr in params.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"name": f"{group}/{name}", "shape": list(a.shape), "offset": offset, "count": int(a.size)})
            chunks.append(a.tobytes(order="C"))
            offset += 8 * a.size
    path.write_bytes(b"".join(chunks))
    manifest = {"format": "evd-params", "version": 1, "dtype": "<f8", "arrays": entries, "config": config or {}}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_params(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    raw = Path(path).read_bytes()
    manifest = json.loads(Path(str(path) + ".json").read_text())
    groups: dict[str, dict[str, np.ndarray]] = {}
    for e in manifest["arrays"]:
        group, name = e["name"].split("/", 1)
        a = np.frombuffer(raw, dtype="<f8", count=e["count"], offset=e["offset"]).reshape(e["shape"])
        groups.setdefault(group, {})[name] = a.astype(np.float64)
    return groups, manifest.get("config", {})


def model_config_dict(config: ModelConfig) -> dict:
    return asdict(config)
