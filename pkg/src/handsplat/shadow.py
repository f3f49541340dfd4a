"""Screen-space self-occlusion shadows from a rendered depth image.

Each pixel compares its depth with depths sampled at a fixed set of disk
offsets; a sample that is closer to the camera by more than a bias counts
as an occluder through a logistic ramp. Works on numpy arrays or torch
tensors (differentiable w.r.t. depth).
"""
from dataclasses import dataclass

import numpy as np
import torch

RADIUS_FRACTION = 0.03
DEFAULT_SAMPLES = 64


@dataclass(frozen=True)
class ShadowParams:
    bias: float = 0.005
    softness: float = 0.002
    strength: float = 0.4

    def __post_init__(self):
        if not self.softness > 0:
            raise ValueError("softness must be positive")
        if self.bias < 0:
            raise ValueError("bias must be non-negative")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")


@dataclass(frozen=True)
class ShadowKernel:
    offsets: np.ndarray  # (n, 2) pixel offsets (dx, dy)
    radius: float
    seed: int

    @property
    def n(self) -> int:
        return len(self.offsets)

    def pixel_offsets(self) -> np.ndarray:
        """Offsets rounded to whole pixels, as used when sampling."""
        return np.rint(self.offsets).astype(np.int64)


def build_kernel(radius: float, n: int = DEFAULT_SAMPLES, seed: int = 0) -> ShadowKernel:
    """``n`` area-stratified random offsets inside a disk of ``radius`` pixels."""
    if n < 1:
        raise ValueError("kernel needs at least one sample")
    if not radius > 0:
        raise ValueError("kernel radius must be positive")
    rng = np.random.default_rng(seed)
    # one sample per equal-area annulus, angles spread by the golden ratio
    u = (np.arange(n) + rng.random(n)) / n
    r = radius * np.sqrt(u)
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    theta = 2.0 * np.pi * ((np.arange(n) * golden + rng.random()) % 1.0)
    offsets = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    # guard against cos/sin rounding pushing a sample past the rim
    norms = np.linalg.norm(offsets, axis=1)
    offsets[norms > radius] *= (radius / norms[norms > radius])[:, None]
    offsets.setflags(write=False)
    return ShadowKernel(offsets, float(radius), int(seed))


def default_kernel(height: int, n: int = DEFAULT_SAMPLES, seed: int = 0) -> ShadowKernel:
    return build_kernel(RADIUS_FRACTION * height, n, seed)


def occlusion(a, b, params: ShadowParams):
    """f(a, b): soft indicator that depth ``b`` occludes a point at depth ``a``."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return torch.sigmoid((a - b - params.bias) / params.softness)
    x = (np.asarray(a, dtype=np.float64) - b - params.bias) / params.softness
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _shift(img: torch.Tensor, valid: torch.Tensor, dx: int, dy: int):
    """Value and validity of img[y + dy, x + dx]; out-of-image samples are invalid."""
    h, w = img.shape
    out = torch.zeros_like(img)
    ok = torch.zeros_like(valid)
    ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
    xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    if abs(dx) < w and abs(dy) < h:
        out[yd, xd] = img[ys, xs]
        ok[yd, xd] = valid[ys, xs]
    return out, ok


def shadow_mask(depth, kernel: ShadowKernel, params: ShadowParams = ShadowParams(), background=None):
    """Shadow mask S in [0, 1]; background pixels neither cast nor receive shadow."""
    as_numpy = not isinstance(depth, torch.Tensor)
    d = torch.as_tensor(np.asarray(depth, dtype=np.float64)) if as_numpy else depth
    if background is None:
        fg = torch.ones(d.shape, dtype=torch.bool)
    else:
        fg = ~torch.as_tensor(np.asarray(background, dtype=bool) if not isinstance(background, torch.Tensor)
                              else background.bool())
    total = torch.zeros_like(d)
    for dx, dy in kernel.pixel_offsets():
        b, ok = _shift(d, fg, int(dx), int(dy))
        total = total + torch.where(ok, occlusion(d, b, params), torch.zeros_like(d))
    s = torch.where(fg, total / kernel.n, torch.zeros_like(d))
    return s.numpy() if as_numpy else s


def composite(rgb, mask, strength: float):
    """Darken ``rgb`` by ``1 - strength * mask``, clamped to [0, 1]."""
    if isinstance(rgb, torch.Tensor) or isinstance(mask, torch.Tensor):
        return torch.clamp(rgb * (1.0 - strength * mask)[..., None], 0.0, 1.0)
    out = np.asarray(rgb) * (1.0 - strength * np.asarray(mask))[..., None]
    return np.clip(out, 0.0, 1.0)
