"""
Pseudo-targets and the event gate
=================================

The event head is trained against self-supervised targets read off latent
change. At sampling time its activity passes through smoothing, a soft
sigmoid, a hysteresis memory and an early-step schedule before it scales the
velocity field. This script follows both halves on one scene.

Run with ``python notebooks/02_pseudo_targets_and_gates.py``.
"""

# %%
import numpy as np

from evd.gating import (
    GateConfig, GateState, apply_schedule, combine_gate, hysteresis_step, schedule_rho, smooth_activity, soft_gate,
)
from evd.latent import SceneParams, dyadic, make_contact_scene
from evd.pseudo import clip_audit, excess_activity, token_targets

scene = make_contact_scene(SceneParams())
a_star = excess_activity(scene.clean_latent, scene.patch)
print("excess activity per frame pair, max over tokens:")
print(np.round(a_star.max(axis=-1), 3))

# %%
# Token targets agree with the swept ground truth on a noiseless scene.
targets = token_targets(scene.clean_latent, scene.patch)
print("targets > 0 matches truth:", np.array_equal(targets > 0, scene.truth_activity > 0))

# %%
# Global camera drift moves every token equally; suppression removes it and the
# diffuseness filter rejects what is left.
drift = dyadic(np.cumsum(np.random.default_rng(0).uniform(-1, 1, (16, 4)), axis=0))
still = make_contact_scene(SceneParams(velocity=(0, 0), camera_drift=drift))
audit = clip_audit(still.clean_latent, still.patch)
print("drift-only clip accepted:", audit["accept"], " confidence:", audit["confidence"])

# %%
# Gate pipeline on a hand-made activity ramp: the band between the two
# thresholds holds the previous state.
cfg = GateConfig()
ramp = np.array([0.1, 0.5, 0.7, 0.5, 0.3, 0.5])
state = GateState.zeros(1)
for a in ramp:
    state = hysteresis_step(np.array([a]), state, cfg)
    g = combine_gate(soft_gate(np.array([a]), cfg), state)
    print(f"a={a:.2f}  soft={soft_gate(np.array([a]), cfg)[0]:.3f}  bin={state.bin[0]:.0f}  gate={g[0]:.3f}")

# %%
# The schedule keeps the gate as is until t* and blends to all-ones by t=1.
for t in (0.0, 0.6, 0.8, 1.0):
    print(f"t={t:.1f}  rho={schedule_rho(t, cfg):.2f}  gate(0)->{apply_schedule(np.zeros(1), schedule_rho(t, cfg))[0]:.2f}")

# %%
# Spatial smoothing spreads a single active token over its 3 x 3 neighbourhood.
one = np.zeros(scene.patch.n_tokens(scene.clean_latent.shape))
one[5] = 1.0
sm = smooth_activity(one, scene.patch, scene.clean_latent.shape)
print("smoothed nonzero tokens:", np.flatnonzero(sm))
