"""
Posing and rendering a Gaussian hand
====================================

Build a capsule-hand template, skin it to a new pose through the weight
field, splat it, and darken self-occluded regions from the depth image.
Images land in ``demo_out/``.
"""
# %%
from pathlib import Path

import numpy as np
import torch

from handsplat.avatar import ShadowSettings
from handsplat.imageio import write_png
from handsplat.synth import build_assets, mild_pose, render_ground_truth, ring_camera

out = Path("demo_out")
out.mkdir(exist_ok=True)
assets = build_assets(n_per_bone=150, seed=0, field_resolution=32)
print(len(assets.template), "template Gaussians")

# %%
# A bent pose seen from the side, where fingers overlap the palm.
rng = np.random.default_rng(4)
pose = mild_pose(rng, assets.canonical, amount=0.8)
extent = float(np.ptp(pose.joints, axis=0).max())
camera = ring_camera(pose.joints.mean(0), 2, 8, 192, extent)

# %%
# Ground-truth appearance with and without the screen-space shadow layer.
with torch.no_grad():
    plain, alpha = render_ground_truth(assets, pose, camera, ShadowSettings(enabled=False))
    shaded, _ = render_ground_truth(assets, pose, camera, ShadowSettings())
write_png(out / "plain.png", plain)
write_png(out / "shaded.png", shaded)
write_png(out / "alpha.png", alpha)
darkened = (shaded.sum(-1) < plain.sum(-1) - 1e-3).mean()
print(f"coverage {(alpha > 0.5).mean():.1%}, pixels darkened by shadow {darkened:.1%}")
