"""Config-driven experiment driver: training runs, sampling, ablations, sweeps and audits.

A run is described by one JSON file with nested sections that mirror the
library dataclasses. Every field has a default; unknown keys and ill-typed
values are rejected with the dotted field path in the message. Output
layouts and byte formats are described in ``docs/formats.md``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import EventHead, MicroDiT, ModelConfig, init_zero_impact, load_params, save_params
from .gating import ConfigError
from .latent import ContactScene, load_scene, make_contact_scene, random_scene_params, save_latent, save_scene
from .losses import LossConfig
from .metrics import MetricsRecord, summarize
from .pseudo import MotionMaskEvents, PseudoTargetConfig, clip_audit
from .sampling import SamplerConfig, sample
from .training import TrainConfig, Trainer

MODES = ("train", "sample", "ablate", "sweep", "audit", "check")
VARIANTS = ("full", "no_real", "no_cons", "train_only", "infer_only", "no_gate_at_inf",
            "const_gate_1.0", "const_gate_0.5", "motion_mask_inf", "baseline")


@dataclass(frozen=True)
class VariantSpec:
    """Which training run a variant samples from, and how events are used at inference."""

    train_run: str
    gating: bool = True
    schedule_mode: str = "anneal"
    rho_const: float = 1.0
    events: str = "head"  # head | motion_mask


VARIANT_SPECS = {
    "full": VariantSpec("full"),
    "no_real": VariantSpec("no_real"),
    "no_cons": VariantSpec("no_cons"),
    # event losses in training, rho == 0 at inference (sampling reduces to the trained backbone)
    "train_only": VariantSpec("full", schedule_mode="off"),
    "infer_only": VariantSpec("infer_only"),
    "no_gate_at_inf": VariantSpec("full", gating=False),
    "const_gate_1.0": VariantSpec("full", schedule_mode="const", rho_const=1.0),
    "const_gate_0.5": VariantSpec("full", schedule_mode="const", rho_const=0.5),
    "motion_mask_inf": VariantSpec("baseline", events="motion_mask"),
    "baseline": VariantSpec("baseline", gating=False),
}
TRAIN_RUNS = ("baseline", "full", "no_real", "no_cons", "infer_only")


@dataclass(frozen=True)
class PathsConfig:
    dataset: str | None = None
    checkpoints: str | None = None
    out: str = "runs"


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 200
    n_heldout: int = 50
    scene_seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.n_train < 1 or self.n_heldout < 1:
            raise ConfigError("data.n_train and data.n_heldout must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError(f"data.noise_sigma must be non-negative, got {self.noise_sigma}")


@dataclass(frozen=True)
class SweepConfig:
    K: tuple[int, ...] = (25, 35, 50, 75)
    w_cfg: tuple[float, ...] = (2.5, 4.0, 6.0, 8.0)
    beta: tuple[float, ...] = (8.0, 16.0)
    bands: tuple[tuple[float, float], ...] = ((0.60, 0.40), (0.65, 0.35), (0.66, 0.42), (0.58, 0.34))
    t_star: tuple[float, ...] = (0.5, 0.7)
    n_scenes: int = 8
    variant: str = "full"


@dataclass(frozen=True)
class AblationConfig:
    variants: tuple[str, ...] = VARIANTS
    n_scenes: int | None = None
    # head-only fit for infer_only: event-loss weight used when loss.lambda_event is 0
    infer_head_lambda_event: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    mode: str = "train"
    seed: int = 0
    variant: str = "full"
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pseudo: PseudoTargetConfig = field(default_factory=PseudoTargetConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    log_every: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for v in self.ablation.variants:
            if v not in VARIANTS:
                raise ConfigError(f"ablation.variants: unknown variant {v!r}")

    @property
    def out_dir(self) -> Path:
        return Path(self.paths.out)

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.paths.checkpoints) if self.paths.checkpoints else self.out_dir / "train"

    @property
    def metrics_window(self) -> float:
        return self.sampler.gate.t_star


# --------------------------------------------------------------------------
# Config (de)serialization
# --------------------------------------------------------------------------

def _coerce(value, default, path: str):
    """Check ``value`` against the type of the field default and convert JSON lists to tuples."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        proto = default[0] if default else 0.0
        return tuple(_coerce(v, proto, f"{path}[{i}]") for i, v in enumerate(value))
    return value


# fields whose default is None, with the element type used when a value is given
_NULLABLE = {"dataset": "", "checkpoints": "", "n_scenes": 0, "time_grid": (0.0,)}


def build_dataclass(cls, data: dict | None, path: str = ""):
    """Instantiate ``cls`` from a nested dict, applying defaults and schema checks."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    proto = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        default = getattr(proto, name)
        sub = f"{path}.{name}" if path else name
        if is_dataclass(default):
            kwargs[name] = build_dataclass(type(default), value, sub)
        elif default is None:
            kwargs[name] = None if value is None else _coerce(value, _NULLABLE.get(name), sub)
        else:
            kwargs[name] = _coerce(value, default, sub)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{path + ': ' if path else ''}{e}") from None


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path, **overrides) -> RunConfig:
    """Read a JSON config; ``overrides`` (seed, out, variant, mode) take precedence when not None."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return with_overrides(build_dataclass(RunConfig, data), **overrides)


def with_overrides(cfg: RunConfig, seed=None, out=None, variant=None, mode=None) -> RunConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = int(seed)
    if variant is not None:
        changes["variant"] = variant
    if mode is not None:
        changes["mode"] = mode
    if out is not None:
        changes["paths"] = replace(cfg.paths, out=str(out))
    return replace(cfg, **changes) if changes else cfg


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

def synth_scenes(cfg: RunConfig) -> list[ContactScene]:
    d = cfg.data
    rng = np.random.default_rng(d.scene_seed)
    spec = cfg.model.patch_spec
    return [make_contact_scene(random_scene_params(rng, cfg.model.latent_shape, spec, d.noise_sigma))
            for _ in range(d.n_train + d.n_heldout)]


def write_dataset(path, scenes) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(scenes):
        save_scene(path / f"scene_{i:05d}.lat", s)


def load_dataset(cfg: RunConfig) -> tuple[list[ContactScene], list[ContactScene]]:
    """Train and held-out scenes: read from ``paths.dataset`` when set, else synthesized from ``data``."""
    d = cfg.data
    if cfg.paths.dataset is None:
        scenes = synth_scenes(cfg)
    else:
        root = Path(cfg.paths.dataset)
        files = sorted(root.glob("*.lat"))
        if not files:
            raise FileNotFoundError(f"dataset {root} has no scene files")
        if len(files) < d.n_train + d.n_heldout:
            raise FileNotFoundError(f"dataset {root} has {len(files)} scenes, config needs {d.n_train + d.n_heldout}")
        scenes = [load_scene(f) for f in files[: d.n_train + d.n_heldout]]
    return scenes[: d.n_train], scenes[d.n_train:]


def stack_scenes(scenes) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.clean_latent for s in scenes]), np.stack([s.conditioning() for s in scenes])


# --------------------------------------------------------------------------
# Run directories
# --------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run_dir: Path, cfg: RunConfig, kind: str, extra: dict | None = None) -> Path:
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "kind": kind,
        "code_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "files": {str(p.relative_to(run_dir)): _sha256(p) for p in files},
        **(extra or {}),
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_jsonl(path: Path, records, mode: str = "w") -> None:
    with open(path, mode) as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_table(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    """Tab-separated table with a header row; floats use ``repr`` so values round-trip exactly."""
    columns = columns or list(rows[0])
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def read_table(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in lines[1:]]


def worker_count(n_jobs: int) -> int:
    try:
        cap = int(os.environ.get("EVD_THREADS", "1"))
    except ValueError:
        raise ConfigError(f"EVD_THREADS must be an integer, got {os.environ['EVD_THREADS']!r}") from None
    return max(1, min(cap, n_jobs))


def _map(fn, jobs: list) -> list:
    n = worker_count(len(jobs))
    if n == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, jobs))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def train_configs(run: str, cfg: RunConfig) -> tuple[LossConfig, TrainConfig]:
    """Loss and optimizer settings of one training run."""
    loss, train = cfg.loss, replace(cfg.train, seed=cfg.seed)
    if run == "baseline":
        return LossConfig(lambda_real=0.0, lambda_cons=0.0, lambda_order=0.0, lambda_event=0.0,
                          time_weight=loss.time_weight, delta_jitter=loss.delta_jitter), replace(train, freeze_head=True)
    if run == "full":
        return loss, train
    if run == "no_real":
        return replace(loss, lambda_real=0.0), train
    if run == "no_cons":
        return replace(loss, lambda_cons=0.0), train
    if run == "infer_only":
        lam = loss.lambda_event or cfg.ablation.infer_head_lambda_event
        head_loss = replace(loss, lambda_real=0.0, lambda_cons=0.0, lambda_order=0.0, lambda_event=lam)
        return head_loss, replace(train, freeze_backbone=True)
    raise ConfigError(f"unknown training run {run!r}")


def fresh_models(cfg: RunConfig) -> tuple[MicroDiT, EventHead]:
    m = MicroDiT(cfg.model)
    h = EventHead(cfg.model.width, cfg.model.head_hidden)
    init_zero_impact(m, h, cfg.seed)
    return m, h


def checkpoint_path(cfg: RunConfig, run: str, ema: bool = True) -> Path:
    return cfg.checkpoint_dir / run / ("ema.bin" if ema else "checkpoint.bin")


def load_models(cfg: RunConfig, run: str) -> tuple[MicroDiT, EventHead]:
    path = checkpoint_path(cfg, run)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint for training run {run!r}: {path}")
    groups, _ = load_params(path)
    m, h = MicroDiT(cfg.model), EventHead(cfg.model.width, cfg.model.head_hidden)
    for k in m.params:
        m.params[k][...] = groups["backbone"][k]
    for k in h.params:
        h.params[k][...] = groups["head"][k]
    return m, h


def run_train(cfg: RunConfig, run: str | None = None, log=None) -> dict:
    """Train one run, writing checkpoint, EMA checkpoint, JSONL loss log and manifest.

    ``run`` defaults to the training run behind ``cfg.variant``. The
    ``infer_only`` run starts from the baseline EMA checkpoint, training it
    first when missing.
    """
    run = run or VARIANT_SPECS[cfg.variant].train_run
    loss_cfg, train_cfg = train_configs(run, cfg)
    train_scenes, _ = load_dataset(cfg)
    z1, y = stack_scenes(train_scenes)
    if run == "infer_only":
        if not checkpoint_path(cfg, "baseline").exists():
            run_train(cfg, "baseline", log=log)
        model, head = load_models(cfg, "baseline")
    else:
        model, head = fresh_models(cfg)
    run_dir = cfg.checkpoint_dir / run
    run_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, head, loss_cfg, train_cfg, cfg.pseudo)
    log_path = run_dir / "metrics.jsonl"
    log_path.write_text("")
    buffer = []
    t0 = time.perf_counter()

    def on_step(rec):
        buffer.append(rec.as_dict())
        if len(buffer) >= cfg.log_every:
            write_jsonl(log_path, buffer, "a")
            buffer.clear()
        if log is not None:
            log(run, rec)

    records = trainer.fit(z1, y, log=on_step)
    write_jsonl(log_path, buffer, "a")
    seconds = time.perf_counter() - t0
    groups = {"backbone": model.params, "head": head.params}
    ema_m, ema_h = trainer.ema_models()
    meta = {"run": run, "model": dataclasses.asdict(cfg.model)}
    save_params(run_dir / "checkpoint.bin", groups, meta)
    save_params(run_dir / "ema.bin", {"backbone": ema_m.params, "head": ema_h.params}, meta)
    base = [r.losses.base for r in records]
    tail = max(1, min(50, len(base) // 10))
    summary = {"run": run, "steps": len(records), "seconds": seconds, "initial_base_loss": float(np.mean(base[:tail])),
               "final_base_loss": float(np.mean(base[-tail:])), "final_total_loss": float(records[-1].losses.total)}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(run_dir, cfg, "train", {"run": run, "loss": config_to_dict(loss_cfg), "trainer": config_to_dict(train_cfg)})
    return summary


def ensure_trained(cfg: RunConfig, runs, log=None) -> None:
    for run in runs:
        if not checkpoint_path(cfg, run).exists():
            run_train(cfg, run, log=log)


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

def variant_sampler(cfg: RunConfig, variant: str, sampler: SamplerConfig | None = None) -> SamplerConfig:
    spec = VARIANT_SPECS[variant]
    s = sampler or cfg.sampler
    if not spec.gating:
        return replace(s, gating_enabled=False)
    return replace(s, gating_enabled=True, schedule_mode=spec.schedule_mode, rho_const=spec.rho_const)


def evaluate_variant(cfg: RunConfig, variant: str, scenes, model=None, head=None, sampler: SamplerConfig | None = None,
                     final_base_loss: float = float("nan")):
    """Sample every scene with one shared seed stream and aggregate the energy metrics."""
    spec = VARIANT_SPECS[variant]
    if model is None:
        model, head = load_models(cfg, spec.train_run)
    scfg = variant_sampler(cfg, variant, sampler)
    events = MotionMaskEvents(model.spec, cfg.pseudo) if spec.events == "motion_mask" else None
    _, y = stack_scenes(scenes)
    z, traj = sample(model, head, y, scfg, seed=cfg.seed, events=events)
    trajs = [(traj.latents[:, i], traj.times) for i in range(len(scenes))]
    rec = summarize(variant, trajs, scenes, scfg.gate.t_star, final_base_loss)
    return rec, z, traj


def _final_base_loss(cfg: RunConfig, run: str) -> float:
    path = cfg.checkpoint_dir / run / "summary.json"
    return json.loads(path.read_text())["final_base_loss"] if path.exists() else float("nan")


def run_sample(cfg: RunConfig, variant: str | None = None, n_scenes: int | None = None) -> MetricsRecord:
    variant = variant or cfg.variant
    _, held = load_dataset(cfg)
    held = held[:n_scenes] if n_scenes else held
    run = VARIANT_SPECS[variant].train_run
    rec, z, traj = evaluate_variant(cfg, variant, held, final_base_loss=_final_base_loss(cfg, run))
    out = cfg.out_dir / "sample" / variant
    (out / "samples").mkdir(parents=True, exist_ok=True)
    for i, (zi, s) in enumerate(zip(z, held)):
        save_latent(out / "samples" / f"sample_{i:05d}.lat", zi, s.event_window, len(s.truth_activity))
    write_jsonl(out / "metrics.jsonl", [rec.as_dict()])
    write_manifest(out, cfg, "sample", {"variant": variant, "checkpoint": str(checkpoint_path(cfg, run))})
    return rec


# --------------------------------------------------------------------------
# Ablations and sweeps
# --------------------------------------------------------------------------

RECORD_COLUMNS = [f.name for f in fields(MetricsRecord)]


def _ablation_job(job):
    cfg, variant, n = job
    _, held = load_dataset(cfg)
    held = held[:n] if n else held
    return evaluate_variant(cfg, variant, held, final_base_loss=_final_base_loss(cfg, VARIANT_SPECS[variant].train_run))[0]


def run_ablation(cfg: RunConfig, train_missing: bool = False, log=None) -> list[MetricsRecord]:
    """One record per variant on identical scenes, seeds and sampler settings; writes JSONL and TSV."""
    variants = list(cfg.ablation.variants)
    runs = sorted({VARIANT_SPECS[v].train_run for v in variants}, key=TRAIN_RUNS.index)
    missing = [r for r in runs if not checkpoint_path(cfg, r).exists()]
    if missing and not train_missing:
        raise FileNotFoundError(f"missing checkpoints for training runs {missing} under {cfg.checkpoint_dir}")
    ensure_trained(cfg, runs, log=log)
    records = _map(_ablation_job, [(cfg, v, cfg.ablation.n_scenes) for v in variants])
    out = cfg.out_dir / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "metrics.jsonl", [r.as_dict() for r in records])
    write_table(out / "ablation.tsv", [r.as_dict() for r in records], RECORD_COLUMNS)
    write_manifest(out, cfg, "ablate", {"variants": variants})
    return records


def sweep_grid(sw: SweepConfig) -> list[dict]:
    grid = [dict(K=k, w_cfg=w, beta=b, tau_on=band[0], tau_off=band[1], t_star=ts)
            for k, w, b, band, ts in itertools.product(sw.K, sw.w_cfg, sw.beta, sw.bands, sw.t_star)]
    if not grid:
        raise ConfigError("sweep grid is empty: every sweep dimension needs at least one value")
    return grid


def _sweep_job(job):
    cfg, point = job
    _, held = load_dataset(cfg)
    held = held[: cfg.sweep.n_scenes]
    gate = replace(cfg.sampler.gate, beta=point["beta"], tau_on=point["tau_on"], tau_off=point["tau_off"],
                   t_star=point["t_star"])
    sampler = replace(cfg.sampler, K=point["K"], w_cfg=point["w_cfg"], gate=gate, time_grid=None)
    rec = evaluate_variant(cfg, cfg.sweep.variant, held, sampler=sampler)[0]
    return {**point, **{k: v for k, v in rec.as_dict().items() if k != "variant"}}


def run_sweep(cfg: RunConfig) -> list[dict]:
    grid = sweep_grid(cfg.sweep)
    run = VARIANT_SPECS[cfg.sweep.variant].train_run
    if not checkpoint_path(cfg, run).exists():
        raise FileNotFoundError(f"missing checkpoint for training run {run!r}: {checkpoint_path(cfg, run)}")
    rows = _map(_sweep_job, [(cfg, p) for p in grid])
    out = cfg.out_dir / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "metrics.jsonl", rows)
    write_table(out / "sweep.tsv", rows)
    write_manifest(out, cfg, "sweep", {"points": len(rows)})
    return rows


# --------------------------------------------------------------------------
# Audit and check
# --------------------------------------------------------------------------

def run_audit(cfg: RunConfig) -> list[dict]:
    """One pseudo-target audit record per dataset clip, in dataset order."""
    train, held = load_dataset(cfg)
    spec = cfg.model.patch_spec
    records = [{"clip": i, **clip_audit(s.clean_latent, spec, cfg.pseudo)} for i, s in enumerate(train + held)]
    out = cfg.out_dir / "audit"
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "audit.jsonl", records)
    write_manifest(out, cfg, "audit", {"clips": len(records)})
    return records


def run_check(cfg: RunConfig | None = None):
    from .checks import run_all

    results = run_all()
    if cfg is not None:
        out = cfg.out_dir / "check"
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "check.jsonl", [r.as_dict() for r in results])
    return results
