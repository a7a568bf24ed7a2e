"""
A small desk-scale ablation
===========================

Trains the baseline and the full event-gated model on synthetic contact
scenes through the harness, then compares update energy before, inside and
after the event window. Sizes here are cut down so the script finishes in a
few minutes; ``configs/acceptance.json`` holds the full protocol.

Run with ``python notebooks/03_desk_experiment.py [out_dir]``.
"""

# %%
import sys
import time

from evd import harness

out = sys.argv[1] if len(sys.argv) > 1 else "runs/notebook"
cfg = harness.build_dataclass(harness.RunConfig, {
    "data": {"n_train": 64, "n_heldout": 16},
    "train": {"steps": 200, "batch_size": 8},
    "sampler": {"K": 20},
    "paths": {"out": out},
})

# %%
# lambda_event is left at 0 here, so the head only sees the gating losses and
# tends to switch every token on; the acceptance config adds the pseudo-target term.
for run in ("baseline", "full"):
    t0 = time.perf_counter()
    s = harness.run_train(cfg, run)
    print(f"{run:9s} base loss {s['initial_base_loss']:.3f} -> {s['final_base_loss']:.3f}  "
          f"({time.perf_counter() - t0:.0f}s)")

# %%
# Energies are summed over the gated steps (t < t*); the *_full columns cover
# the whole trajectory.
_, held = harness.load_dataset(cfg)
print(f"{'variant':16s} {'E_pre':>10s} {'E_in':>10s} {'E_post':>10s} {'E_pre_full':>11s} {'mse':>8s}")
for variant in ("baseline", "full", "train_only", "motion_mask_inf"):
    rec, _, _ = harness.evaluate_variant(cfg, variant, held)
    print(f"{variant:16s} {rec.E_pre:10.3e} {rec.E_in:10.3e} {rec.E_post:10.3e} {rec.E_pre_full:11.3e} {rec.mse:8.4f}")
