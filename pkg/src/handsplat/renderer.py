"""Software Gaussian splatting with depth, alpha and an exact backward pass.

Projection runs in torch so gradients reach 3D positions and scales; the
per-pixel compositing runs in numba kernels wrapped as an autograd function.
Isotropic Gaussians (one scale, identity rotation) are the default; the
anisotropic path projects the full 3D covariance.
"""
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np
import torch

from . import _raster

Z_NEAR = 0.01
BACKGROUND_EPS = 1e-3
FAR_FACTOR = 1.1
ALPHA_MAX = _raster.ALPHA_MAX
T_MIN = _raster.T_MIN
CUTOFF_SIGMA = 3.0


class MissingTapeError(RuntimeError):
    """render_backward called on an output rendered without a tape."""


def set_threads(n: Optional[int]) -> int:
    """Set numba and torch thread counts; returns the count actually used."""
    limit = numba.config.NUMBA_NUM_THREADS
    n = limit if n is None else int(n)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if n > limit:
        warnings.warn(f"requested {n} threads, numba allows {limit}", RuntimeWarning, stacklevel=2)
        n = limit
    numba.set_num_threads(n)
    torch.set_num_threads(n)
    return n


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.array(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        m.setflags(write=False)
        object.__setattr__(self, "world_to_camera", m)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("world_to_camera rotation is not a proper rotation")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValueError("world_to_camera last row must be (0, 0, 0, 1)")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target, up, fx, width, height, fy=None, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; x right, y down, z forward."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        m = np.eye(4)
        m[:3, :3] = np.stack([x, y, z])
        m[:3, 3] = -m[:3, :3] @ eye
        return cls(fx=float(fx), fy=float(fx if fy is None else fy),
                   cx=(width - 1) / 2 if cx is None else float(cx),
                   cy=(height - 1) / 2 if cy is None else float(cy),
                   width=width, height=height, world_to_camera=m)

    def to_json(self) -> dict:
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
                "width": self.width, "height": self.height,
                "world_to_camera": [float(v) for v in self.world_to_camera.ravel()]}

    @classmethod
    def from_json(cls, data: dict) -> "Camera":
        keys = {"fx", "fy", "cx", "cy", "width", "height", "world_to_camera"}
        missing = keys - set(data)
        if missing:
            raise ValueError(f"camera JSON missing keys: {sorted(missing)}")
        if len(data["world_to_camera"]) != 16:
            raise ValueError("world_to_camera must hold 16 numbers")
        return cls(fx=float(data["fx"]), fy=float(data["fy"]), cx=float(data["cx"]), cy=float(data["cy"]),
                   width=int(data["width"]), height=int(data["height"]),
                   world_to_camera=np.array(data["world_to_camera"], dtype=np.float64).reshape(4, 4))


def save_camera(camera: Camera, path) -> None:
    Path(path).write_text(json.dumps(camera.to_json(), indent=2))


def load_camera(path) -> Camera:
    return Camera.from_json(json.loads(Path(path).read_text()))


@dataclass
class GaussianSet:
    """Scene Gaussians: isotropic when ``scales`` is (G,), anisotropic when (G, 3)."""
    positions: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    quaternions: Optional[np.ndarray] = None

    def __post_init__(self):
        g = len(self.positions)
        if np.shape(self.positions) != (g, 3) or np.shape(self.colors) != (g, 3):
            raise ValueError("positions and colors must be G×3")
        if np.shape(self.opacities) != (g,):
            raise ValueError("opacities must have shape (G,)")
        if np.shape(self.scales) not in ((g,), (g, 3)):
            raise ValueError("scales must be (G,) or (G, 3)")
        if np.any(np.asarray(self.scales) <= 0):
            raise ValueError("scales must be positive")
        if self.quaternions is not None and np.shape(self.quaternions) != (g, 4):
            raise ValueError("quaternions must be G×4")

    def __len__(self):
        return len(self.positions)

    @property
    def isotropic(self) -> bool:
        return np.ndim(self.scales) == 1


def project(camera: Camera, position, scale: float):
    """Project one isotropic Gaussian; returns (mean2d, sigma_px, z) or None if culled."""
    p = camera.rotation @ np.asarray(position, dtype=np.float64) + camera.translation
    z = p[2]
    if z <= Z_NEAR:
        return None
    mu = np.array([camera.fx * p[0] / z + camera.cx, camera.fy * p[1] / z + camera.cy])
    sx, sy = scale * camera.fx / z, scale * camera.fy / z
    r = CUTOFF_SIGMA * max(sx, sy)
    if mu[0] + r < 0 or mu[0] - r > camera.width - 1 or mu[1] + r < 0 or mu[1] - r > camera.height - 1:
        return None
    return mu, float(scale * camera.fx / z), float(z)


def quaternion_matrix(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


@dataclass
class Projection:
    means2d: torch.Tensor
    conics: torch.Tensor
    depths: torch.Tensor
    radii: np.ndarray
    visible: np.ndarray


def project_gaussians(camera: Camera, positions: torch.Tensor, scales: torch.Tensor,
                      quaternions: Optional[torch.Tensor] = None) -> Projection:
    """Batched projection; (G,) scales take the isotropic path."""
    dtype = positions.dtype
    rot = torch.tensor(camera.rotation, dtype=dtype)
    p = positions @ rot.T + torch.tensor(camera.translation, dtype=dtype)
    z = p[:, 2]
    front = z > Z_NEAR
    # keep culled rows finite so no NaN leaks into gradients
    zs = torch.where(front, z, torch.ones_like(z))
    mu = torch.stack([camera.fx * p[:, 0] / zs + camera.cx, camera.fy * p[:, 1] / zs + camera.cy], dim=1)
    if scales.dim() == 1:
        sx = scales * camera.fx / zs
        sy = scales * camera.fy / zs
        conics = torch.stack([1.0 / sx ** 2, torch.zeros_like(sx), 1.0 / sy ** 2], dim=1)
        extent = torch.maximum(sx, sy)
    else:
        if quaternions is None:
            r3 = torch.eye(3, dtype=dtype).expand(len(scales), 3, 3)
        else:
            r3 = quaternion_matrix(quaternions)
        cov3 = r3 @ torch.diag_embed(scales ** 2) @ r3.transpose(1, 2)
        zero = torch.zeros_like(zs)
        jac = torch.stack([
            torch.stack([camera.fx / zs, zero, -camera.fx * p[:, 0] / zs ** 2], dim=1),
            torch.stack([zero, camera.fy / zs, -camera.fy * p[:, 1] / zs ** 2], dim=1),
        ], dim=1)
        m = jac @ rot
        cov2 = m @ cov3 @ m.transpose(1, 2)
        a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
        det = a * c - b * b
        conics = torch.stack([c / det, -b / det, a / det], dim=1)
        mid = 0.5 * (a + c)
        extent = torch.sqrt(mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0)))
    radii = (CUTOFF_SIGMA * extent).detach().cpu().numpy().astype(np.float64)
    m_np = mu.detach().cpu().numpy()
    visible = (front.cpu().numpy()
               & (m_np[:, 0] + radii >= 0) & (m_np[:, 0] - radii <= camera.width - 1)
               & (m_np[:, 1] + radii >= 0) & (m_np[:, 1] - radii <= camera.height - 1))
    return Projection(mu, conics, z, radii, visible)


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conics, depths, colors, opacities, order, radii, width, height):
        np_dtype = np.float64 if means2d.dtype == torch.float64 else np.float32
        arrays = [np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np_dtype)
                  for t in (means2d, conics, depths, colors, opacities)]
        offsets, entries = _raster.bin_tiles(order, arrays[0], radii, width, height)
        rgb, depth, alpha, trans, last = _raster.forward(offsets, entries, *arrays, width, height)
        ctx.state = (offsets, entries, arrays, trans, last, width, height, np_dtype)
        return tuple(torch.from_numpy(x) for x in (rgb, depth, alpha))

    @staticmethod
    def backward(ctx, g_rgb, g_depth, g_alpha):
        offsets, entries, arrays, trans, last, width, height, np_dtype = ctx.state
        n = len(arrays[2])

        def grad_array(g, shape):
            if g is None:
                return np.zeros(shape, dtype=np_dtype)
            return np.ascontiguousarray(g.detach().cpu().numpy(), dtype=np_dtype)

        per_entry = _raster.backward(offsets, entries, *arrays, width, height, trans, last,
                                     grad_array(g_rgb, (height, width, 3)),
                                     grad_array(g_depth, (height, width)),
                                     grad_array(g_alpha, (height, width)))
        total = torch.from_numpy(_raster.reduce_entries(entries, per_entry, n))
        return (total[:, 0:2], total[:, 2:5], total[:, 5], total[:, 6:9], total[:, 9],
                None, None, None, None)


def rasterize(projection: Projection, colors: torch.Tensor, opacities: torch.Tensor,
              width: int, height: int):
    """Composite projected Gaussians; returns (rgb, raw depth, alpha) tensors."""
    depths = projection.depths
    idx = np.flatnonzero(projection.visible)
    z = depths.detach().cpu().numpy()[idx]
    order = idx[np.argsort(z, kind="stable")].astype(np.int64)
    return _Rasterize.apply(projection.means2d, projection.conics, depths, colors, opacities,
                            order, projection.radii, int(width), int(height))


def finish_depth(raw_depth: torch.Tensor, alpha: torch.Tensor, depths: torch.Tensor, visible: np.ndarray):
    """Replace background pixels by the far sentinel; returns (depth, background)."""
    if visible.any():
        zmax = depths[torch.from_numpy(visible)].max()
    else:
        zmax = torch.tensor(1.0 / FAR_FACTOR, dtype=raw_depth.dtype)
    background = alpha.detach() < BACKGROUND_EPS
    far = (FAR_FACTOR * zmax).to(raw_depth.dtype).expand_as(raw_depth)
    return torch.where(background, far, raw_depth), background


def render_tensors(camera: Camera, positions, colors, opacities, scales, quaternions=None) -> dict:
    """Differentiable render; returns a dict of tensors (rgb, depth, alpha, background)."""
    proj = project_gaussians(camera, positions, scales, quaternions)
    rgb, raw, alpha = rasterize(proj, colors, opacities, camera.width, camera.height)
    depth, background = finish_depth(raw, alpha, proj.depths, proj.visible)
    return {"rgb": rgb, "depth": depth, "alpha": alpha, "background": background,
            "visible": proj.visible}


@dataclass
class RenderOutput:
    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    background: np.ndarray
    shadow: Optional[np.ndarray] = None
    _tape: Optional[dict] = field(default=None, repr=False)

    @property
    def has_tape(self) -> bool:
        return self._tape is not None


def render(gaussians: GaussianSet, camera: Camera, mode: str = "eval", dtype=torch.float32) -> RenderOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    leaves = {name: torch.tensor(np.asarray(getattr(gaussians, name)), dtype=dtype, requires_grad=train)
              for name in ("positions", "colors", "opacities", "scales")}
    quats = None
    if gaussians.quaternions is not None and not gaussians.isotropic:
        quats = torch.tensor(np.asarray(gaussians.quaternions), dtype=dtype)
    with torch.set_grad_enabled(train):
        out = render_tensors(camera, leaves["positions"], leaves["colors"], leaves["opacities"],
                             leaves["scales"], quats)
    tape = {"leaves": leaves, "outputs": out} if train else None
    return RenderOutput(rgb=out["rgb"].detach().numpy(), depth=out["depth"].detach().numpy(),
                        alpha=out["alpha"].detach().numpy(), background=out["background"].numpy(),
                        _tape=tape)


def render_backward(output: RenderOutput, d_rgb, d_depth, d_alpha=None) -> dict:
    """Gradients of sum(d_rgb·rgb + d_depth·depth + d_alpha·alpha) w.r.t. the scene."""
    if output._tape is None:
        raise MissingTapeError("output was rendered in eval mode; render with mode='train'")
    out = output._tape["outputs"]
    leaves = output._tape["leaves"]
    names = list(leaves)
    targets, grads = [], []
    for key, g in (("rgb", d_rgb), ("depth", d_depth), ("alpha", d_alpha)):
        if g is not None:
            targets.append(out[key])
            grads.append(torch.as_tensor(np.asarray(g), dtype=out[key].dtype))
    result = torch.autograd.grad(targets, [leaves[n] for n in names], grads,
                                 retain_graph=True, allow_unused=True)
    return {n: (np.zeros(leaves[n].shape) if r is None else r.numpy()) for n, r in zip(names, result)}
