"""Latent video tensors, patchification and the synthetic contact-scene generator.

A latent video is a float64 array of shape ``(T, H, W, C)``; batched code paths
accept any number of leading batch axes, ``(..., T, H, W, C)``.

Token raster order is fixed: tokens are enumerated t-major, then h, then w
over the patch grid, and each token row is the patch contents flattened in
(t, h, w, channel) order. ``tokenize`` followed by ``untokenize`` is a pure
reshape/transpose pair, so the round trip is bit-exact.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_AXES = ("T", "H", "W")


class ShapeError(ValueError):
    """Raised when a tensor shape is inconsistent with a patch spec."""


class GeometryError(ValueError):
    """Raised when a contact scene cannot be laid out on the latent grid."""


def check_latent(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 4:
        raise ShapeError(f"latent video needs at least 4 axes (T, H, W, C), got shape {z.shape}")
    if min(z.shape[-4:]) <= 0:
        raise ShapeError(f"latent video axes must be positive, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("latent video contains non-finite entries")
    return z


@dataclass(frozen=True)
class PatchSpec:
    """Non-overlapping spatiotemporal patch extents ``(p_t, p_h, p_w)``."""

    pt: int = 2
    ph: int = 2
    pw: int = 2

    def __post_init__(self):
        for name, p in zip(("pt", "ph", "pw"), self.extents):
            if int(p) != p or p <= 0:
                raise ShapeError(f"patch extent {name} must be a positive integer, got {p}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.pt, self.ph, self.pw)

    def grid(self, shape) -> tuple[int, int, int]:
        """Patch-grid size ``(T/pt, H/ph, W/pw)`` for a latent of ``shape`` (T, H, W, C)."""
        dims = tuple(shape[-4:-1]) if len(shape) >= 4 else tuple(shape[:3])
        out = []
        for axis, n, p in zip(_AXES, dims, self.extents):
            if n % p:
                raise ShapeError(f"axis {axis} of size {n} is not divisible by patch extent {p}")
            out.append(n // p)
        return tuple(out)

    def n_tokens(self, shape) -> int:
        gt, gh, gw = self.grid(shape)
        return gt * gh * gw

    def token_dim(self, shape) -> int:
        return self.pt * self.ph * self.pw * int(shape[-1])


@dataclass
class TokenField:
    """Token matrix ``(..., N, D)`` tied to the patch spec and latent shape that produced it."""

    data: np.ndarray
    spec: PatchSpec
    latent_shape: tuple[int, int, int, int]

    @property
    def n_tokens(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]


def patchify(z: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Array-level Tok: ``(..., T, H, W, C) -> (..., N, D)``."""
    z = np.asarray(z)
    if z.ndim < 4:
        raise ShapeError(f"expected (..., T, H, W, C), got shape {z.shape}")
    gt, gh, gw = spec.grid(z.shape)
    lead = z.shape[:-4]
    c = z.shape[-1]
    k = len(lead)
    x = z.reshape(*lead, gt, spec.pt, gh, spec.ph, gw, spec.pw, c)
    perm = tuple(range(k)) + tuple(k + i for i in (0, 2, 4, 1, 3, 5, 6))
    x = x.transpose(perm)
    return x.reshape(*lead, gt * gh * gw, spec.pt * spec.ph * spec.pw * c)


def unpatchify(tokens: np.ndarray, spec: PatchSpec, latent_shape) -> np.ndarray:
    """Array-level UnTok: ``(..., N, D) -> (..., T, H, W, C)``."""
    tokens = np.asarray(tokens)
    t, h, w, c = latent_shape[-4:]
    gt, gh, gw = spec.grid((t, h, w, c))
    n, d = gt * gh * gw, spec.token_dim((t, h, w, c))
    if tokens.ndim < 2 or tokens.shape[-2:] != (n, d):
        raise ShapeError(f"token matrix shape {tokens.shape[-2:]} does not match (N, D) = {(n, d)}")
    lead = tokens.shape[:-2]
    k = len(lead)
    x = tokens.reshape(*lead, gt, gh, gw, spec.pt, spec.ph, spec.pw, c)
    perm = tuple(range(k)) + tuple(k + i for i in (0, 3, 1, 4, 2, 5, 6))
    x = x.transpose(perm)
    return x.reshape(*lead, t, h, w, c)


def tokenize(z: np.ndarray, spec: PatchSpec) -> TokenField:
    z = np.asarray(z, dtype=np.float64)
    data = patchify(z, spec)
    return TokenField(data=data, spec=spec, latent_shape=tuple(z.shape[-4:]))


def untokenize(tok: TokenField) -> np.ndarray:
    return unpatchify(tok.data, tok.spec, tok.latent_shape)


# --------------------------------------------------------------------------
# Synthetic contact scenes
# --------------------------------------------------------------------------

def dyadic(x, bits: int = 6) -> np.ndarray:
    """Round to multiples of ``2**-bits`` so sums and differences stay exact."""
    scale = float(2**bits)
    return np.round(np.asarray(x, dtype=np.float64) * scale) / scale


@dataclass
class SceneParams:
    """Geometry of one synthetic contact scene.

    Positions and velocities are integer pixel units; the blob is an
    axis-aligned ``blob_size`` square painted with ``blob_value`` over a
    static background. ``event_window = (tau_e, tau_s)``: the blob rests on
    frames ``< tau_e``, moves by ``velocity`` per frame between frames
    ``tau_e`` and ``tau_s``, and rests again from frame ``tau_s`` on.
    """

    shape: tuple[int, int, int, int] = (16, 8, 8, 4)
    patch: PatchSpec = field(default_factory=PatchSpec)
    blob_pos: tuple[int, int] = (2, 0)
    blob_size: tuple[int, int] = (2, 2)
    velocity: tuple[int, int] = (0, 1)
    event_window: tuple[int, int] = (4, 10)
    blob_value: tuple[float, ...] | None = None
    background: np.ndarray | None = None
    camera_drift: np.ndarray | None = None
    noise_sigma: float = 0.0
    seed: int = 0


@dataclass
class ContactScene:
    clean_latent: np.ndarray
    truth_activity: np.ndarray
    event_window: tuple[int, int]
    blob_pos: tuple[int, int]
    blob_size: tuple[int, int]
    velocity: tuple[int, int]
    patch: PatchSpec
    camera_drift: np.ndarray | None = None
    noise_sigma: float = 0.0

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.clean_latent.shape)

    def position(self, frame: int) -> tuple[int, int]:
        return blob_position(self.blob_pos, self.velocity, self.event_window, frame)

    def conditioning(self) -> np.ndarray:
        """Width-8 embedding of the scene geometry, used as the prompt ``y``."""
        t, h, w, _ = self.shape
        te, ts = self.event_window
        (y0, x0), (vy, vx) = self.blob_pos, self.velocity
        return np.array(
            [2 * y0 / h - 1, 2 * x0 / w - 1, vy, vx, 2 * te / t - 1, 2 * ts / t - 1, (ts - te) / t, 1.0]
        )


def blob_position(pos, velocity, window, frame: int) -> tuple[int, int]:
    te, ts = window
    steps = min(max(frame - te, 0), ts - te)
    return (pos[0] + velocity[0] * steps, pos[1] + velocity[1] * steps)


def _footprint_mask(pos, size, hw) -> np.ndarray:
    m = np.zeros(hw, dtype=bool)
    m[pos[0]:pos[0] + size[0], pos[1]:pos[1] + size[1]] = True
    return m


def default_background(shape, seed: int = 0) -> np.ndarray:
    """Static smooth-ish dyadic texture in [-0.5, 0.5] shared by every frame."""
    _, h, w, c = shape
    rng = np.random.default_rng(seed)
    base = rng.uniform(-0.5, 0.5, size=(h, w, c))
    base = 0.5 * base + 0.125 * (np.roll(base, 1, 0) + np.roll(base, -1, 0) + np.roll(base, 1, 1) + np.roll(base, -1, 1))
    return dyadic(base)


def default_blob_value(channels: int) -> np.ndarray:
    vals = np.array([1.5, -1.25, 1.0, -1.5, 1.25, -1.0, 1.5, -1.25])
    return np.resize(vals, channels)


def transition_truth(scene: ContactScene) -> np.ndarray:
    """Per-transition spatial-token truth ``(T-1, Hp*Wp)``.

    Transition ``tau`` (frame tau -> tau+1) marks every spatial patch that
    overlaps the blob footprint at either frame, provided the blob moved.
    """
    t, h, w, _ = scene.shape
    p = scene.patch
    gh, gw = h // p.ph, w // p.pw
    out = np.zeros((t - 1, gh * gw), dtype=bool)
    for tau in range(t - 1):
        a, b = scene.position(tau), scene.position(tau + 1)
        if a == b:
            continue
        fp = _footprint_mask(a, scene.blob_size, (h, w)) | _footprint_mask(b, scene.blob_size, (h, w))
        for i in range(gh):
            for j in range(gw):
                if fp[i * p.ph:(i + 1) * p.ph, j * p.pw:(j + 1) * p.pw].any():
                    out[tau, i * gw + j] = True
    return out


def transitions_for_slot(slot: int, pt: int, frames: int) -> list[int]:
    """Transitions touching temporal patch ``slot``: tau or tau+1 inside its frames."""
    lo, hi = slot * pt, (slot + 1) * pt
    return [tau for tau in range(frames - 1) if lo <= tau < hi or lo <= tau + 1 < hi]


def slot_truth(per_transition: np.ndarray, patch: PatchSpec, frames: int) -> np.ndarray:
    """Lift a ``(T-1, Ns)`` transition map to the ``N`` tokens of the 3D patch grid."""
    gt = frames // patch.pt
    rows = []
    for s in range(gt):
        taus = transitions_for_slot(s, patch.pt, frames)
        rows.append(per_transition[taus].any(axis=0) if taus else np.zeros(per_transition.shape[1], bool))
    return np.concatenate(rows)


def make_contact_scene(params: SceneParams) -> ContactScene:
    t, h, w, c = params.shape
    te, ts = params.event_window
    if not (0 <= te <= ts <= t):
        raise GeometryError(f"event window {params.event_window} must satisfy 0 <= tau_e <= tau_s <= {t}")
    params.patch.grid(params.shape)
    bh, bw = params.blob_size
    for frame in range(t):
        y, x = blob_position(params.blob_pos, params.velocity, params.event_window, frame)
        if y < 0 or x < 0 or y + bh > h or x + bw > w:
            raise GeometryError(f"blob at ({y}, {x}) size {params.blob_size} leaves the {h}x{w} grid on frame {frame}")

    bg = default_background(params.shape, params.seed) if params.background is None else np.asarray(params.background, float)
    value = default_blob_value(c) if params.blob_value is None else np.asarray(params.blob_value, float)
    z = np.empty((t, h, w, c))
    for frame in range(t):
        z[frame] = bg
        y, x = blob_position(params.blob_pos, params.velocity, params.event_window, frame)
        z[frame, y:y + bh, x:x + bw, :] = value

    drift = None
    if params.camera_drift is not None:
        drift = np.asarray(params.camera_drift, dtype=np.float64)
        if drift.shape[0] != t:
            raise GeometryError(f"camera_drift needs one entry per frame ({t}), got {drift.shape[0]}")
        z = z + drift.reshape(t, 1, 1, -1)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.seed + 7919)
        z = z + params.noise_sigma * rng.standard_normal(z.shape)

    scene = ContactScene(
        clean_latent=z,
        truth_activity=np.zeros(params.patch.n_tokens(params.shape)),
        event_window=(te, ts),
        blob_pos=tuple(params.blob_pos),
        blob_size=tuple(params.blob_size),
        velocity=tuple(params.velocity),
        patch=params.patch,
        camera_drift=drift,
        noise_sigma=float(params.noise_sigma),
    )
    scene.truth_activity = slot_truth(transition_truth(scene), params.patch, t).astype(np.float64)
    return scene


def random_scene_params(rng: np.random.Generator, shape=(16, 8, 8, 4), patch: PatchSpec | None = None,
                        noise_sigma: float = 0.0, background_seed: int = 0) -> SceneParams:
    """Draw a valid scene: a 2x2 blob that rests, slides with unit speed, then rests."""
    t, h, w, _ = shape
    patch = patch or PatchSpec()
    while True:
        vy, vx = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, 1), (1, -1), (-1, -1)][rng.integers(8)]
        length = int(rng.integers(3, 7))
        te = int(rng.integers(2, t - length - 2))
        y0, x0 = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
        y1, x1 = y0 + vy * length, x0 + vx * length
        if 0 <= y1 <= h - 2 and 0 <= x1 <= w - 2:
            return SceneParams(shape=shape, patch=patch, blob_pos=(y0, x0), velocity=(vy, vx),
                               event_window=(te, te + length), noise_sigma=noise_sigma, seed=background_seed)


# --------------------------------------------------------------------------
# Binary serialization (layout documented in docs/formats.md)
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<8q")


def save_latent(path, z: np.ndarray, event_window=(0, 0), n_tokens: int = 0, meta: dict | None = None) -> None:
    """Write ``z`` (T, H, W, C) as header + little-endian f64 payload, plus a JSON sidecar."""
    z = np.ascontiguousarray(check_latent(z), dtype="<f8")
    if z.ndim != 4:
        raise ShapeError(f"save_latent expects a single (T, H, W, C) clip, got {z.shape}")
    path = Path(path)
    header = _HEADER.pack(FORMAT_VERSION, *z.shape, int(event_window[0]), int(event_window[1]), int(n_tokens))
    path.write_bytes(header + z.tobytes(order="C"))
    if meta is not None:
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_latent(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    version, t, h, w, c, te, ts, n = _HEADER.unpack_from(raw, 0)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported latent format version {version}")
    count = t * h * w * c
    if len(raw) != _HEADER.size + 8 * count:
        raise ValueError(f"payload size mismatch: expected {count} float64 values")
    z = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size, count=count).reshape(t, h, w, c).astype(np.float64)
    return z, {"version": version, "event_window": (te, ts), "n_tokens": n}


def save_scene(path, scene: ContactScene) -> None:
    meta = {
        "format": "evd-contact-scene",
        "version": FORMAT_VERSION,
        "patch": list(scene.patch.extents),
        "blob_pos": list(scene.blob_pos),
        "blob_size": list(scene.blob_size),
        "velocity": list(scene.velocity),
        "event_window": list(scene.event_window),
        "noise_sigma": scene.noise_sigma,
        "camera_drift": None if scene.camera_drift is None else scene.camera_drift.tolist(),
        "truth_activity": [int(v) for v in scene.truth_activity],
    }
    save_latent(path, scene.clean_latent, scene.event_window, len(scene.truth_activity), meta)


def load_scene(path) -> ContactScene:
    z, header = load_latent(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    drift = meta.get("camera_drift")
    return ContactScene(
        clean_latent=z,
        truth_activity=np.asarray(meta["truth_activity"], dtype=np.float64),
        event_window=tuple(header["event_window"]),
        blob_pos=tuple(meta["blob_pos"]),
        blob_size=tuple(meta["blob_size"]),
        velocity=tuple(meta["velocity"]),
        patch=PatchSpec(*meta["patch"]),
        camera_drift=None if drift is None else np.asarray(drift),
        noise_sigma=float(meta["noise_sigma"]),
    )
