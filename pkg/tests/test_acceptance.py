"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line.

Criteria 1-9 reuse the invariant suite in ``evd.checks``. Criteria 10 and 11
train micro models on 200 synthetic contact scenes with
``configs/acceptance.json`` and evaluate on 50 held-out scenes; the trained
runs are shared through module-scoped fixtures.
"""
import time
from pathlib import Path

import pytest

from evd import checks, harness

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance.json"
BUDGET_10 = 15 * 60


def report(capsys, n: int, title: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")


def run_check(capsys, n: int, title: str, fn, limit: float | None = None):
    res = checks.timed(fn)
    ok = res.passed and (limit is None or res.seconds < limit)
    budget = f", limit {limit:g}s" if limit is not None else ""
    report(capsys, n, title, ok, f"{res.detail} [{res.seconds:.2f}s{budget}]")
    assert res.passed, res.detail
    if limit is not None:
        assert res.seconds < limit, f"took {res.seconds:.1f}s"


def test_01_gate_arithmetic(capsys):
    run_check(capsys, 1, "gate arithmetic", checks.check_gate_arithmetic, 5.0)


def test_02_base_model_recovery(capsys):
    run_check(capsys, 2, "base-model recovery", checks.check_base_recovery, 30.0)


def test_03_solver_exactness(capsys):
    run_check(capsys, 3, "solver exactness", checks.check_solver_exactness, 10.0)


def test_04_cfg_identities(capsys):
    run_check(capsys, 4, "cfg identities", checks.check_cfg_identities)


def test_05_gradient_correctness(capsys):
    run_check(capsys, 5, "gradient correctness", checks.check_gradients, 120.0)


def test_06_loss_identities(capsys):
    run_check(capsys, 6, "loss identities", checks.check_loss_identities)


def test_07_zero_impact_initialization(capsys):
    run_check(capsys, 7, "zero-impact initialization", checks.check_zero_impact)


def test_08_pseudo_target_properties(capsys):
    run_check(capsys, 8, "pseudo-target properties", checks.check_pseudo_targets)


def test_09_evaluation_count(capsys):
    run_check(capsys, 9, "evaluation count", checks.check_evaluation_count)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = harness.load_config(CONFIG, out=str(tmp_path_factory.mktemp("acceptance")))
    t0 = time.perf_counter()
    summaries = {run: harness.run_train(cfg, run) for run in ("baseline", "full")}
    _, held = harness.load_dataset(cfg)
    recs = {v: harness.evaluate_variant(cfg, v, held)[0] for v in ("baseline", "full")}
    return {"cfg": cfg, "held": held, "recs": recs, "summaries": summaries, "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def ablation(desk):
    cfg, held = desk["cfg"], desk["held"]
    for run in ("no_real", "infer_only"):
        harness.run_train(cfg, run)
    recs = dict(desk["recs"])
    for v in ("no_real", "train_only", "infer_only", "motion_mask_inf"):
        recs[v] = harness.evaluate_variant(cfg, v, held)[0]
    return recs


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else float("inf")


def test_10_desk_directional_experiment(desk, capsys):
    full, base = desk["recs"]["full"], desk["recs"]["baseline"]
    pre, post = _ratio(full.E_pre, base.E_pre), _ratio(full.E_post, base.E_post)
    ok = pre < 0.7 and post < 0.8 and desk["seconds"] < BUDGET_10
    s = desk["summaries"]
    report(capsys, 10, "desk-scale directional experiment", ok,
           f"E_pre ratio {pre:.3g} (<0.7), E_post ratio {post:.3g} (<0.8), "
           f"raw full/baseline E_pre {full.E_pre:.3e}/{base.E_pre:.3e}, E_post {full.E_post:.3e}/{base.E_post:.3e}, "
           f"whole-trajectory E_pre {full.E_pre_full:.3e}/{base.E_pre_full:.3e}, "
           f"mse {full.mse:.3f}/{base.mse:.3f}, base loss full {s['full']['initial_base_loss']:.3f}->"
           f"{s['full']['final_base_loss']:.3f}, baseline {s['baseline']['initial_base_loss']:.3f}->"
           f"{s['baseline']['final_base_loss']:.3f} [{desk['seconds']:.0f}s, limit {BUDGET_10}s]")
    assert pre < 0.7 and post < 0.8
    assert desk["seconds"] < BUDGET_10


def test_11_ablation_ordering(ablation, capsys):
    score = {v: r.E_pre + r.E_post for v, r in ablation.items()}
    rivals = ("no_real", "train_only", "infer_only", "motion_mask_inf")
    beaten = {v: score["full"] < score[v] for v in rivals}
    raw = ", ".join(f"{v} {score[v]!r}" for v in ("full",) + rivals)
    whole = ", ".join(f"{v} {ablation[v].E_pre_full + ablation[v].E_post_full:.4e}" for v in ("full",) + rivals)
    lost = [v for v, b in beaten.items() if not b]
    report(capsys, 11, "ablation ordering", not lost,
           f"E_pre+E_post raw values: {raw}" + (f"; full not strictly lower than {', '.join(lost)}" if lost else "")
           + f"; whole-trajectory sums (diagnostic only): {whole}")
    assert not lost, f"full not strictly lower than {lost}: {score}"
