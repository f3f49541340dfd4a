"""Synthetic capsule-hand assets and multi-view datasets with known appearance."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .avatar import ShadowSettings
from .kinematics import (AngleLimits, HandSkeleton, build_local_frames, bone_vectors, canonical_skeleton,
                         compute_transform, extract_pose, load_skeleton, save_skeleton, skeleton_from_angles)
from .mesh import CanonicalMesh, capsule_hand, load_obj, save_obj
from .optimizer import FrameRecord, save_dataset
from .renderer import Camera, render_tensors
from .shadow import composite, shadow_mask
from .template import (CanonicalTemplate, WeightField, build_weight_field, load_template, load_weight_field,
                       pose_gaussians, sample_template, save_template, save_weight_field)

SKIN = np.array([0.86, 0.62, 0.50])
GT_OPACITY = 0.95
GT_SCALE = 0.003
CAMERA_DISTANCE = 0.45

ASSET_FILES = {"mesh": "mesh.obj", "canonical": "canonical.json",
               "template": "template.jgtp", "field": "weights.jgwf"}


@dataclass
class Assets:
    mesh: CanonicalMesh
    canonical: HandSkeleton
    template: CanonicalTemplate
    field: WeightField


def build_assets(n_per_bone: int = 200, seed: int = 0, field_resolution: int = 48,
                 canonical: HandSkeleton = None) -> Assets:
    canonical = canonical_skeleton() if canonical is None else canonical
    mesh = capsule_hand(canonical)
    template = sample_template(mesh, canonical, n_per_bone, seed)
    field = build_weight_field(mesh, canonical, (field_resolution,) * 3)
    return Assets(mesh, canonical, template, field)


def save_assets(assets: Assets, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_obj(assets.mesh, root / ASSET_FILES["mesh"])
    save_skeleton(assets.canonical, root / ASSET_FILES["canonical"])
    save_template(assets.template, root / ASSET_FILES["template"])
    save_weight_field(assets.field, root / ASSET_FILES["field"])


def load_assets(root) -> Assets:
    root = Path(root)
    return Assets(load_obj(root / ASSET_FILES["mesh"]), load_skeleton(root / ASSET_FILES["canonical"]),
                  load_template(root / ASSET_FILES["template"]), load_weight_field(root / ASSET_FILES["field"]))


def ground_truth_colors(uvd: np.ndarray) -> np.ndarray:
    """Smooth skin-like albedo varying along the surface and with depth."""
    u, v, d = (np.asarray(uvd, dtype=np.float64)[:, k] for k in range(3))
    shade = (0.85 + 0.15 * np.cos(2 * np.pi * 20 * u)) * (0.8 + 0.2 * v) * (1.0 - 0.25 * d)
    return np.clip(SKIN[None, :] * shade[:, None], 0.0, 1.0)


def mild_pose(rng: np.random.Generator, canonical: HandSkeleton, amount: float = 0.3,
              limits: AngleLimits = None) -> HandSkeleton:
    """Canonical angles pulled ``amount`` of the way toward a random in-limit pose."""
    limits = AngleLimits.default() if limits is None else limits
    angles = extract_pose(canonical)
    flex = rng.uniform(limits.flexion[:, 0], limits.flexion[:, 1])
    abd = rng.uniform(limits.abduction[:, 0], limits.abduction[:, 1])
    flex = angles.flexion + amount * (flex - angles.flexion)
    abd = angles.abduction + amount * (abd - angles.abduction)
    palm = build_local_frames(canonical).frames[0]
    return skeleton_from_angles(flex, abd, bone_vectors(canonical).lengths, palm, canonical.joints[0])


def ring_camera(center, index: int, n_views: int, size: int, extent: float) -> Camera:
    az = 2 * np.pi * index / n_views
    el = np.deg2rad(20.0 if index % 2 == 0 else -10.0)
    direction = np.array([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)])
    fx = size * CAMERA_DISTANCE / (1.15 * extent)
    return Camera.look_at(center + CAMERA_DISTANCE * direction, center, [0.0, 1.0, 0.0], fx, size, size)


def render_ground_truth(assets: Assets, skeleton: HandSkeleton, camera: Camera,
                        shadow: ShadowSettings = ShadowSettings()):
    """(rgb, alpha) of the reference appearance rigidly skinned to ``skeleton``."""
    t = compute_transform(assets.canonical, skeleton)
    x = torch.as_tensor(pose_gaussians(assets.template, assets.field, t))
    g = len(assets.template)
    colors = torch.as_tensor(ground_truth_colors(assets.template.uvd))
    out = render_tensors(camera, x, colors, torch.full((g,), GT_OPACITY, dtype=torch.float64),
                         torch.full((g,), GT_SCALE, dtype=torch.float64))
    rgb = out["rgb"]
    if shadow.enabled:
        s = shadow_mask(out["depth"], shadow.kernel(camera.height), shadow.params, out["background"])
        rgb = composite(rgb, s, shadow.params.strength)
    return rgb.numpy(), out["alpha"].numpy()


def make_frames(assets: Assets, n_views: int, image_size: int, seed: int, pose_amount: float = 0.3,
                shadow: ShadowSettings = ShadowSettings()) -> list:
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    frames = []
    with torch.no_grad():
        for k in range(n_views):
            skel = mild_pose(rng, assets.canonical, pose_amount)
            center = skel.joints.mean(0)
            extent = float(np.ptp(skel.joints, axis=0).max())
            cam = ring_camera(center, k, n_views, image_size, extent)
            rgb, alpha = render_ground_truth(assets, skel, cam, shadow)
            frames.append(FrameRecord(rgb, alpha > 0.5, skel, cam, frame_id=k))
    return frames


def synthesize(out_dir, n_views: int = 8, image_size: int = 128, seed: int = 0, n_per_bone: int = 200,
               field_resolution: int = 48) -> Assets:
    """Write assets plus a complete dataset manifest to ``out_dir``."""
    assets = build_assets(n_per_bone, seed, field_resolution)
    save_assets(assets, out_dir)
    # re-read so the frames are rendered from exactly what was written (f32 files)
    assets = load_assets(out_dir)
    save_dataset(make_frames(assets, n_views, image_size, seed), out_dir)
    return assets
