"""
Contact scenes and the token grid
=================================

A contact scene is a static background with a small square blob that rests,
slides for a few frames, then rests again. Everything downstream (targets,
gates, metrics) is measured on the patch-token grid, so this script walks
through one scene and its tokens.

Run with ``python notebooks/01_scenes_and_tokens.py``.
"""

# %%
import numpy as np

from evd.latent import PatchSpec, SceneParams, make_contact_scene, tokenize, untokenize

scene = make_contact_scene(SceneParams())
z = scene.clean_latent
print("latent shape (T, H, W, C):", z.shape)
print("event window [tau_e, tau_s):", scene.event_window)

# %%
# Per-frame change: zero outside the window, nonzero while the blob moves.
change = np.abs(np.diff(z, axis=0)).sum(axis=(1, 2, 3))
for tau, c in enumerate(change):
    print(f"frames {tau:2d}->{tau + 1:2d}  total |dz| = {c:6.3f}")

# %%
# Patchify: (2, 2, 2) patches give an 8 x 4 x 4 grid of 32-dim tokens.
spec = PatchSpec(2, 2, 2)
tok = tokenize(z, spec)
print("tokens (N, D):", tok.data.shape)
assert np.array_equal(untokenize(tok), z)

# %%
# Ground truth activity marks the tokens the blob sweeps through.
truth = scene.truth_activity.reshape(spec.grid(z.shape))
for slot, grid in enumerate(truth):
    rows = [" ".join("#" if v else "." for v in row) for row in grid]
    print(f"slot {slot}: " + " | ".join(rows))
