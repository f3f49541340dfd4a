"""Canonical Gaussian template: interior sampling, uvd coordinates, the
voxelized skinning-weight field and linear blend skinning."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .kinematics import NUM_BONES, NUM_JOINTS, HandSkeleton, SkeletonTransform
from .mesh import CanonicalMesh, bone_distances, closest_points, winding_number

WEIGHT_EPS = 1e-4
PALM_RIGIDITY = 0.5
INSIDE_THRESHOLD = 0.5
SURFACE_TOL = 1e-9
# grid coordinates this close to a node snap onto it, so node queries are exact
NODE_SNAP = 1e-9

_TEMPLATE_MAGIC = b"JGTP"
_TEMPLATE_VERSION = 1
_FIELD_MAGIC = b"JGWF"
_FIELD_VERSION = 1

_RECORD = np.dtype([("position", "<f4", (3,)), ("uvd", "<f4", (3,)), ("label", "u1")])


class SamplingExhaustedError(RuntimeError):
    """A bone could not collect enough interior samples within the retry budget."""


class OutsideMeshError(ValueError):
    pass


@dataclass
class CanonicalTemplate:
    positions: np.ndarray  # (G, 3) float32
    uvd: np.ndarray  # (G, 3) float32
    bone_label: np.ndarray  # (G,) uint8, values 1..20
    n_per_bone: int
    d_max: float

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.uvd = np.ascontiguousarray(self.uvd, dtype=np.float32)
        self.bone_label = np.ascontiguousarray(self.bone_label, dtype=np.uint8)
        self.d_max = float(np.float32(self.d_max))

    def __len__(self) -> int:
        return len(self.positions)

    def counts(self) -> np.ndarray:
        return np.bincount(self.bone_label, minlength=NUM_BONES + 1)[1:]


def _proposal_boxes(mesh: CanonicalMesh, skeleton: HandSkeleton, pad: float = 0.1):
    """Per-bone sampling boxes: bounds of the vertices nearest to each bone."""
    nearest = bone_distances(mesh.vertices, skeleton).argmin(1)
    lo_all, hi_all = mesh.vertices.min(0), mesh.vertices.max(0)
    boxes = []
    for bone in range(NUM_BONES):
        v = mesh.vertices[nearest == bone]
        if len(v) == 0:
            lo, hi = lo_all, hi_all
        else:
            lo, hi = v.min(0), v.max(0)
            margin = pad * (hi - lo) + 1e-4
            lo, hi = np.maximum(lo - margin, lo_all), np.minimum(hi + margin, hi_all)
        boxes.append((lo, hi))
    return boxes


def sample_template(mesh: CanonicalMesh, skeleton: HandSkeleton, n_per_bone: int, seed: int,
                    max_rounds: int = 40, bones=None) -> CanonicalTemplate:
    """Rejection-sample ``n_per_bone`` interior points for every bone.

    Candidates are drawn per bone from an independent stream seeded by
    ``(seed, bone)``, kept when they are inside the mesh (winding number
    above 0.5) and their nearest bone segment is that bone. ``bones``
    (1-based labels) restricts sampling to a subset.
    """
    if n_per_bone < 1:
        raise ValueError("n_per_bone must be >= 1")
    labels_wanted = list(range(1, NUM_BONES + 1)) if bones is None else sorted({int(b) for b in bones})
    if not labels_wanted or min(labels_wanted) < 1 or max(labels_wanted) > NUM_BONES:
        raise ValueError("bones must be labels in 1..20")
    boxes = _proposal_boxes(mesh, skeleton)
    positions = []
    for bone in (b - 1 for b in labels_wanted):
        rng = np.random.default_rng([seed, bone])
        lo, hi = boxes[bone]
        kept = []
        have = 0
        drawn = accepted = 0
        for _ in range(max_rounds):
            need = n_per_bone - have
            if need <= 0:
                break
            rate = (accepted + 1) / (drawn + 2)
            batch = int(min(max(1.3 * need / rate, 256), 200_000))
            cand = rng.uniform(lo, hi, size=(batch, 3)).astype(np.float32).astype(np.float64)
            cand = cand[winding_number(cand, mesh) > INSIDE_THRESHOLD]
            ok = bone_distances(cand, skeleton).argmin(1) == bone
            drawn += batch
            accepted += int(ok.sum())
            kept.append(cand[ok][:need])
            have += min(int(ok.sum()), need)
        if have < n_per_bone:
            raise SamplingExhaustedError(
                f"bone {bone + 1}: only {have} of {n_per_bone} interior samples after {max_rounds} rounds"
            )
        positions.append(np.concatenate(kept)[:n_per_bone])
    positions = np.concatenate(positions)
    labels = np.repeat(np.array(labels_wanted), n_per_bone)
    face, bary, dist = closest_points(positions, mesh)
    d_max = float(dist.max())
    uvd = _uvd_from_projection(mesh, face, bary, dist, d_max)
    return CanonicalTemplate(positions, uvd, labels, n_per_bone, d_max)


def _uvd_from_projection(mesh, face, bary, dist, d_max):
    uv = np.einsum("nk,nkc->nc", bary, mesh.face_uvs[face])
    d = np.clip(dist / d_max, 0.0, 1.0) if d_max > 0 else np.zeros_like(dist)
    return np.concatenate([np.clip(uv, 0.0, 1.0), d[:, None]], axis=1)


def compute_uvd(points, mesh: CanonicalMesh, d_max: float, check_inside: bool = True) -> np.ndarray:
    """(u, v, d) for interior points: UV at the nearest surface point, distance / d_max."""
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    face, bary, dist = closest_points(pts, mesh)
    if check_inside:
        # the winding number is ill-defined exactly on a face, so accept surface points by distance
        inside = (winding_number(pts, mesh) > INSIDE_THRESHOLD) | (dist <= SURFACE_TOL)
        if not inside.all():
            raise OutsideMeshError("uvd is only defined for points inside the mesh")
    out = _uvd_from_projection(mesh, face, bary, dist, d_max)
    return out[0] if np.ndim(points) == 1 else out


# --------------------------------------------------------------------------
# skinning weights


def skinning_weights(points, skeleton: HandSkeleton, eps: float = WEIGHT_EPS,
                     palm_rigidity: float = PALM_RIGIDITY) -> np.ndarray:
    """Inverse-squared-distance weights over the 21 joints, shape (n, 21).

    Bone ``i`` feeds joint ``i``; a ``palm_rigidity`` share of each
    level-1 bone's weight goes to the root.
    """
    raw = 1.0 / (eps + bone_distances(points, skeleton)) ** 2
    w = np.zeros((raw.shape[0], NUM_JOINTS))
    w[:, 1:] = raw
    w[:, 1:6] *= 1.0 - palm_rigidity
    w[:, 0] = palm_rigidity * raw[:, :5].sum(1)
    return w / w.sum(1, keepdims=True)


@dataclass
class WeightField:
    weights: np.ndarray  # (nx, ny, nz, 21) float32
    bbox: np.ndarray  # (2, 3) float32: min, max corners

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        self.bbox = np.ascontiguousarray(self.bbox, dtype=np.float32).reshape(2, 3)

    @property
    def resolution(self) -> tuple:
        return tuple(self.weights.shape[:3])

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox[1].astype(np.float64) - self.bbox[0]) / (np.array(self.resolution) - 1)

    def node_positions(self) -> np.ndarray:
        axes = [
            self.bbox[0, k].astype(np.float64) + np.arange(n) * self.spacing[k]
            for k, n in enumerate(self.resolution)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1)


def build_weight_field(mesh: CanonicalMesh, skeleton: HandSkeleton, resolution=(64, 64, 64),
                       pad: float = 0.1, eps: float = WEIGHT_EPS) -> WeightField:
    """Sample ``skinning_weights`` on a grid spanning the padded mesh bounds."""
    resolution = tuple(int(r) for r in np.broadcast_to(resolution, 3))
    if min(resolution) < 8:
        raise ValueError("weight field resolution must be >= 8 per axis")
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    margin = pad * (hi - lo)
    bbox = np.stack([lo - margin, hi + margin]).astype(np.float32)
    field = WeightField(np.zeros(resolution + (NUM_JOINTS,), np.float32), bbox)
    nodes = field.node_positions().reshape(-1, 3)
    out = np.empty((len(nodes), NUM_JOINTS), np.float32)
    for start in range(0, len(nodes), 65536):
        out[start:start + 65536] = skinning_weights(nodes[start:start + 65536], skeleton, eps)
    field.weights = out.reshape(resolution + (NUM_JOINTS,))
    return field


def _cell_coords(field: WeightField, points: np.ndarray):
    res = np.array(field.resolution)
    t = (points - field.bbox[0].astype(np.float64)) / field.spacing
    t = np.where(np.abs(t - np.rint(t)) < NODE_SNAP, np.rint(t), t)
    t = np.clip(t, 0.0, res - 1)
    i0 = np.minimum(np.floor(t).astype(np.int64), res - 2)
    return i0, t - i0


def query_weights(field: WeightField, points) -> np.ndarray:
    """Trilinear interpolation of the field; points outside are clamped."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    i0, frac = _cell_coords(field, pts)
    out = np.zeros((len(pts), NUM_JOINTS))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wx = frac[:, 0] if dx else 1 - frac[:, 0]
                wy = frac[:, 1] if dy else 1 - frac[:, 1]
                wz = frac[:, 2] if dz else 1 - frac[:, 2]
                vals = field.weights[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out += (wx * wy * wz)[:, None] * vals
    return out[0] if np.ndim(points) == 1 else out


def query_weights_torch(field: WeightField, points: torch.Tensor, table: torch.Tensor = None) -> torch.Tensor:
    """Differentiable (w.r.t. ``points``) version of ``query_weights``."""
    dtype = points.dtype
    res = torch.tensor(field.resolution, dtype=dtype)
    lo = torch.tensor(field.bbox[0], dtype=dtype)
    h = torch.tensor(field.spacing, dtype=dtype)
    if table is None:
        table = torch.from_numpy(field.weights).to(dtype)
    t = (points - lo) / h
    snap = (torch.round(t) - t).detach()
    t = torch.where(snap.abs() < NODE_SNAP, t + snap, t)
    t = torch.minimum(torch.clamp(t, min=0.0), res - 1)
    i0 = torch.minimum(torch.floor(t.detach()), res - 2).long()
    frac = t - i0.to(dtype)
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wx = frac[:, 0] if dx else 1 - frac[:, 0]
                wy = frac[:, 1] if dy else 1 - frac[:, 1]
                wz = frac[:, 2] if dz else 1 - frac[:, 2]
                vals = table[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out = out + (wx * wy * wz)[:, None] * vals
    return out


def blend_transforms(weights: torch.Tensor, per_joint: torch.Tensor) -> torch.Tensor:
    """Per-point blended 4x4 matrices ``sum_j W_j B_j``."""
    return (weights @ per_joint.reshape(NUM_JOINTS, 16)).reshape(-1, 4, 4)


def pose_gaussians(template: CanonicalTemplate, field: WeightField, transform: SkeletonTransform,
                   identity_offsets=None, nonrigid_offsets=None, dtype=None, table=None):
    """Posed centers ``(sum_j W_j B_j)(p + dx_id) + dx_nr``.

    Weights are read at the offset canonical position; ``table`` is an
    optional pre-converted torch copy of the field weights. Returns a torch
    tensor if any offset is a tensor, otherwise a numpy array.
    """
    want_numpy = not any(isinstance(x, torch.Tensor) for x in (identity_offsets, nonrigid_offsets))
    if dtype is None:
        dtype = next((x.dtype for x in (identity_offsets, nonrigid_offsets) if isinstance(x, torch.Tensor)),
                     torch.float64)
    p = torch.from_numpy(template.positions).to(dtype)
    q = p if identity_offsets is None else p + torch.as_tensor(identity_offsets, dtype=dtype)
    w = query_weights_torch(field, q, table)
    m = blend_transforms(w, transform.per_joint.to(dtype))
    x = (m[:, :3, :3] @ q.unsqueeze(-1)).squeeze(-1) + m[:, :3, 3]
    if nonrigid_offsets is not None:
        x = x + torch.as_tensor(nonrigid_offsets, dtype=dtype)
    return x.detach().numpy() if want_numpy else x


# --------------------------------------------------------------------------
# binary formats


def save_template(template: CanonicalTemplate, path) -> None:
    rec = np.zeros(len(template), dtype=_RECORD)
    rec["position"] = template.positions
    rec["uvd"] = template.uvd
    rec["label"] = template.bone_label
    with open(path, "wb") as fh:
        fh.write(_TEMPLATE_MAGIC)
        fh.write(struct.pack("<IIfI", _TEMPLATE_VERSION, len(template), template.d_max, template.n_per_bone))
        fh.write(rec.tobytes())


def load_template(path) -> CanonicalTemplate:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _TEMPLATE_MAGIC:
        raise ValueError(f"{path}: not a template file")
    version, count, d_max, n_per_bone = struct.unpack_from("<IIfI", data, 4)
    if version != _TEMPLATE_VERSION:
        raise ValueError(f"{path}: unsupported template version {version}")
    rec = np.frombuffer(data, dtype=_RECORD, count=count, offset=20)
    return CanonicalTemplate(rec["position"].copy(), rec["uvd"].copy(), rec["label"].copy(), n_per_bone, d_max)


def save_weight_field(field: WeightField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<I3I", _FIELD_VERSION, *field.resolution))
        fh.write(field.bbox.astype("<f4").tobytes())
        fh.write(field.weights.astype("<f4").tobytes())


def load_weight_field(path) -> WeightField:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _FIELD_MAGIC:
        raise ValueError(f"{path}: not a weight-field file")
    version, nx, ny, nz = struct.unpack_from("<I3I", data, 4)
    if version != _FIELD_VERSION:
        raise ValueError(f"{path}: unsupported weight-field version {version}")
    bbox = np.frombuffer(data, "<f4", 6, 20).reshape(2, 3)
    weights = np.frombuffer(data, "<f4", nx * ny * nz * NUM_JOINTS, 44).reshape(nx, ny, nz, NUM_JOINTS)
    return WeightField(weights.copy(), bbox.copy())
