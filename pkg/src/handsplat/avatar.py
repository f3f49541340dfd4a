"""The full per-frame pipeline: skeleton -> posed, decoded Gaussians -> image."""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .appearance import AppearanceModel, ClampCounter, normalize_angles
from .kinematics import AngleLimits, HandSkeleton, compute_transform, extract_pose
from .renderer import Camera, render_tensors
from .shadow import ShadowKernel, ShadowParams, build_kernel, composite, default_kernel, shadow_mask
from .template import CanonicalTemplate, WeightField, pose_gaussians


@dataclass
class PoseInputs:
    """Everything the decoder and skinning need from one target skeleton."""
    transform: object
    normalized_angles: np.ndarray  # (20, 2), rows (a, f)


@dataclass
class ShadowSettings:
    enabled: bool = True
    params: ShadowParams = ShadowParams()
    samples: int = 64
    radius: Optional[float] = None  # pixels; defaults to a fraction of image height
    seed: int = 0
    gradients: bool = True

    def kernel(self, height: int) -> ShadowKernel:
        if self.radius is None:
            return default_kernel(height, self.samples, self.seed)
        return build_kernel(self.radius, self.samples, self.seed)


class HandAvatar:
    def __init__(self, template: CanonicalTemplate, field: WeightField, canonical: HandSkeleton,
                 model: AppearanceModel, limits: AngleLimits = None):
        if model.num_gaussians != len(template):
            raise ValueError(f"model has {model.num_gaussians} Gaussians, template has {len(template)}")
        self.template = template
        self.field = field
        self.canonical = canonical
        self.model = model
        self.limits = AngleLimits.default() if limits is None else limits
        self.clamps = ClampCounter()
        self._tables = {}
        self._kernels = {}

    @property
    def dtype(self) -> torch.dtype:
        return self.model.log_scales.dtype

    def _table(self, dtype):
        if dtype not in self._tables:
            self._tables[dtype] = torch.from_numpy(self.field.weights).to(dtype)
        return self._tables[dtype]

    def pose_inputs(self, skeleton: HandSkeleton) -> PoseInputs:
        """Kinematics for one target; raises DegenerateSkeletonError on bad input."""
        transform = compute_transform(self.canonical, skeleton)
        angles = extract_pose(skeleton)
        norm, _ = normalize_angles(angles.flexion, angles.abduction, self.limits, self.clamps)
        return PoseInputs(transform, norm)

    def gaussians(self, pose: PoseInputs) -> dict:
        dtype = self.dtype
        uvd = torch.from_numpy(self.template.uvd).to(dtype)
        labels = torch.from_numpy(self.template.bone_label.astype(np.int64))
        dec = self.model(uvd, labels, torch.as_tensor(pose.normalized_angles, dtype=dtype))
        dec["positions"] = pose_gaussians(self.template, self.field, pose.transform,
                                          dec["identity_offset"], dec["nonrigid_offset"],
                                          dtype=dtype, table=self._table(dtype))
        return dec

    def render(self, pose: PoseInputs, camera: Camera, shadow: ShadowSettings = ShadowSettings()) -> dict:
        g = self.gaussians(pose)
        out = render_tensors(camera, g["positions"], g["color"], g["opacity"], g["scales"])
        out["gaussians"] = g
        out["raw_rgb"] = out["rgb"]
        if shadow.enabled:
            key = (camera.height, shadow.samples, shadow.radius, shadow.seed)
            if key not in self._kernels:
                self._kernels[key] = shadow.kernel(camera.height)
            depth = out["depth"] if shadow.gradients else out["depth"].detach()
            s = shadow_mask(depth, self._kernels[key], shadow.params, out["background"])
            out["shadow"] = s
            out["rgb"] = composite(out["raw_rgb"], s, shadow.params.strength)
        else:
            out["shadow"] = torch.zeros_like(out["alpha"])
        return out
