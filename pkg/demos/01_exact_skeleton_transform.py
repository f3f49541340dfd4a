"""
Exact keypoint-driven skeleton transforms
=========================================

Given only 21 joint positions of a target hand, recover a per-joint rigid
transform that carries the canonical skeleton onto the target exactly,
even when bone lengths differ.
"""
# %%
import numpy as np

from handsplat.kinematics import (AngleLimits, apply_transform, canonical_skeleton, compute_transform,
                                  extract_pose, mpjpe, sample_pose)

canonical = canonical_skeleton()
print("canonical wrist at", canonical.joints[0], "bone count", len(canonical.joints) - 1)

# %%
# A random target: angles drawn inside the default joint limits, bone
# lengths scaled by up to +-30%, and a random global rotation.
rng = np.random.default_rng(0)
target = sample_pose(rng, canonical)
angles = extract_pose(target)
print("index-finger flexion (deg):", np.rad2deg(angles.flexion[[1, 6, 11, 16]]).round(1))

# %%
# The transform is a product of per-joint factors; applying it to the
# canonical joints reproduces the target to machine precision.
t = compute_transform(canonical, target)
posed = apply_transform(t, canonical)
print(f"MPJPE {mpjpe(posed, target):.2e} m")

# %%
# Batched: a thousand targets at once.
targets = np.stack([sample_pose(rng, canonical).joints for _ in range(1000)])
batch = compute_transform(canonical, targets)
errors = mpjpe(apply_transform(batch, canonical), targets)
print(f"1000 targets: max MPJPE {errors.max():.2e} m")

# %%
# Limits are per bone; angles outside them are still transformed exactly,
# they only matter for the appearance model's normalized pose features.
limits = AngleLimits.default()
print("flexion range of the index tip (deg):", np.rad2deg(limits.flexion[16]).round(1))
