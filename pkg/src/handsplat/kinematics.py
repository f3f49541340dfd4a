"""Keypoint-driven skeleton transformation for a 21-joint hand.

Joint layout: index 0 is the wrist. Fingers are ordered thumb, index,
middle, ring, pinky; the level-``k`` joint of finger ``f`` sits at
``f + 1 + 5 * (k - 1)``. Bone ``i`` (1..20) runs from ``parent(i)`` to joint
``i``.

Everything here is written with torch in float64 and works on a leading
batch dimension, so the transform is differentiable with respect to the
target joint coordinates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Union

import numpy as np
import torch

NUM_JOINTS = 21
NUM_BONES = 20
NUM_FINGERS = 5
FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

PARENTS = np.array([-1] + [0] * 5 + list(range(1, 16)), dtype=np.int64)
LEVELS = np.array([0] + [1] * 5 + [2] * 5 + [3] * 5 + [4] * 5, dtype=np.int64)
FINGER_OF = np.array([-1] + [i % 5 for i in range(20)], dtype=np.int64)

# Bones (by distal joint index) spanning the palm reference frame.
_PALM_Z_BONE = 3
_PALM_PLANE = (2, 3)

# Minimum norms below which geometry is treated as degenerate.
BONE_EPS = 1e-9
PLANE_EPS = 1e-9
GIMBAL_EPS = 1e-8

ArrayLike = Union[np.ndarray, torch.Tensor]


class DegenerateSkeletonError(ValueError):
    """Raised for skeletons with zero-length bones or non-finite joints."""


class DegeneratePalmError(DegenerateSkeletonError):
    """Raised when adjacent level-1 bones are collinear."""


class GimbalError(DegenerateSkeletonError):
    """Raised when a bone is parallel to its local y-axis."""

    def __init__(self, joint: int, message: Optional[str] = None):
        self.joint = int(joint)
        super().__init__(message or f"bone {joint} is parallel to its local y-axis")


def joint_index(finger: int, level: int) -> int:
    return finger + 1 + 5 * (level - 1)


def finger_chain(finger: int) -> list[int]:
    return [joint_index(finger, k) for k in range(1, 5)]


def palm_plane_bones(finger: int) -> tuple[int, int]:
    """Level-1 bones spanning the palm plane used by ``finger``."""
    if finger < NUM_FINGERS - 1:
        return finger + 1, finger + 2
    return finger, finger + 1


@dataclass(frozen=True)
class HandSkeleton:
    """21 joint positions in meters."""

    joints: np.ndarray

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.shape != (NUM_JOINTS, 3):
            raise ValueError(f"expected joints of shape (21, 3), got {joints.shape}")
        if not np.all(np.isfinite(joints)):
            raise DegenerateSkeletonError("joint coordinates must be finite")
        object.__setattr__(self, "joints", joints)

    @property
    def root(self) -> np.ndarray:
        return self.joints[0]

    def translated(self, offset) -> "HandSkeleton":
        return HandSkeleton(self.joints + np.asarray(offset, dtype=np.float64))

    def to_json(self) -> dict:
        return {"format": "jg21", "units": "m", "joints": self.joints.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "HandSkeleton":
        if data.get("format") != "jg21":
            raise ValueError(f"unsupported skeleton format {data.get('format')!r}")
        if data.get("units", "m") != "m":
            raise ValueError("skeleton units must be meters")
        return cls(np.asarray(data["joints"], dtype=np.float64))


def load_skeleton(path) -> HandSkeleton:
    with open(path) as fh:
        return HandSkeleton.from_json(json.load(fh))


def save_skeleton(skeleton: HandSkeleton, path) -> None:
    with open(path, "w") as fh:
        json.dump(skeleton.to_json(), fh, indent=1)


def canonical_skeleton() -> HandSkeleton:
    """The shipped mean-pose right hand (palm facing -z, fingers along +y)."""
    text = resources.files("handsplat").joinpath("data/canonical_skeleton.json").read_text()
    return HandSkeleton.from_json(json.loads(text))


def permute_joints(joints: np.ndarray, order) -> np.ndarray:
    """Reorder joints from another dataset's layout.

    ``order[i]`` is the source index of our joint ``i``.
    """
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (NUM_JOINTS,) or sorted(order.tolist()) != list(range(NUM_JOINTS)):
        raise ValueError("order must be a permutation of 0..20")
    return np.asarray(joints)[..., order, :]


# --------------------------------------------------------------------------
# torch helpers


def _as_joints(x) -> torch.Tensor:
    if isinstance(x, HandSkeleton):
        x = x.joints
    if isinstance(x, torch.Tensor):
        t = x.to(torch.float64)
    else:
        t = torch.tensor(np.asarray(x, dtype=np.float64))
    if t.shape[-2:] != (NUM_JOINTS, 3):
        raise ValueError(f"expected (..., 21, 3) joints, got {tuple(t.shape)}")
    return t


def _check_finite(j: torch.Tensor) -> None:
    if not torch.isfinite(j).all():
        raise DegenerateSkeletonError("joint coordinates must be finite")


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / torch.linalg.norm(v, dim=-1, keepdim=True)


def _bones(j: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    parents = torch.as_tensor(PARENTS[1:])
    b = j[..., 1:, :] - j[..., parents, :]
    lengths = torch.linalg.norm(b, dim=-1)
    bad = lengths <= BONE_EPS
    if bad.any():
        bone = int(torch.nonzero(bad)[0, -1]) + 1
        raise DegenerateSkeletonError(f"bone {bone} has zero length")
    return b, lengths


def direction(flexion, abduction):
    """Unit bone direction for (flexion, abduction) in a local frame."""
    lib = torch if isinstance(flexion, torch.Tensor) else np
    ca = lib.cos(abduction)
    return lib.stack([ca * lib.sin(flexion), lib.sin(abduction), ca * lib.cos(flexion)], -1)


def _local_rotation(flexion: torch.Tensor, abduction: torch.Tensor) -> torch.Tensor:
    """Ry(flexion) @ Rx(-abduction); its third column is ``direction``."""
    cf, sf = torch.cos(flexion), torch.sin(flexion)
    ca, sa = torch.cos(abduction), torch.sin(abduction)
    zero = torch.zeros_like(cf)
    rows = [
        torch.stack([cf, -sf * sa, sf * ca], -1),
        torch.stack([zero, ca, sa], -1),
        torch.stack([-sf, -cf * sa, cf * ca], -1),
    ]
    return torch.stack(rows, -2)


def _angles_in(frame: torch.Tensor, d: torch.Tensor, joint: int) -> tuple[torch.Tensor, torch.Tensor]:
    local = (frame.transpose(-1, -2) @ d.unsqueeze(-1)).squeeze(-1)
    x, y, z = local.unbind(-1)
    xz = torch.sqrt(x * x + z * z)
    if (xz <= GIMBAL_EPS).any():
        raise GimbalError(joint)
    return torch.atan2(x, z), torch.atan2(y, xz)


def _frame_from(z: torch.Tensor, normal: torch.Tensor) -> torch.Tensor:
    """Frame with columns (x, y, z): x is ``normal`` made orthogonal to z."""
    x = normal - (normal * z).sum(-1, keepdim=True) * z
    x = _unit(x)
    y = torch.linalg.cross(z, x)
    return torch.stack([x, y, z], -1)


def _palm_normals(d: torch.Tensor) -> torch.Tensor:
    """Unit normals of the four palm planes between adjacent level-1 bones.

    ``d`` holds unit bone directions indexed by bone - 1. Returns (..., 4, 3).
    """
    normals = []
    for k in range(4):
        n = torch.linalg.cross(d[..., k, :], d[..., k + 1, :])
        norm = torch.linalg.norm(n, dim=-1, keepdim=True)
        if (norm <= PLANE_EPS).any():
            raise DegeneratePalmError(f"level-1 bones {k + 1} and {k + 2} are collinear")
        normals.append(n / norm)
    return torch.stack(normals, -2)


def _finger_normal(normals: torch.Tensor, finger: int) -> torch.Tensor:
    return normals[..., min(finger, 3), :]


def _palm_frame(d: torch.Tensor, normals: torch.Tensor) -> torch.Tensor:
    return _frame_from(d[..., _PALM_Z_BONE - 1, :], normals[..., _PALM_PLANE[0] - 1, :])


@dataclass
class _Geometry:
    bones: torch.Tensor
    lengths: torch.Tensor
    dirs: torch.Tensor
    normals: torch.Tensor
    palm: torch.Tensor
    frames: torch.Tensor  # (..., 20, 3, 3), columns x, y, z
    flexion: torch.Tensor  # (..., 20)
    abduction: torch.Tensor


def _analyze(j: torch.Tensor) -> _Geometry:
    _check_finite(j)
    b, lengths = _bones(j)
    d = b / lengths.unsqueeze(-1)
    normals = _palm_normals(d)
    palm = _palm_frame(d, normals)
    frames: list = [None] * NUM_BONES
    flex: list = [None] * NUM_BONES
    abd: list = [None] * NUM_BONES
    for f in range(NUM_FINGERS):
        chain = finger_chain(f)
        for level, i in enumerate(chain, start=1):
            if level == 1:
                frame = palm
            elif level == 2:
                frame = _frame_from(d[..., chain[0] - 1, :], _finger_normal(normals, f))
            else:
                p = chain[level - 2]
                frame = frames[p - 1] @ _local_rotation(flex[p - 1], abd[p - 1])
            frames[i - 1] = frame
            flex[i - 1], abd[i - 1] = _angles_in(frame, d[..., i - 1, :], i)
    return _Geometry(
        bones=b,
        lengths=lengths,
        dirs=d,
        normals=normals,
        palm=palm,
        frames=torch.stack(frames, -3),
        flexion=torch.stack(flex, -1),
        abduction=torch.stack(abd, -1),
    )


# --------------------------------------------------------------------------
# public data types


@dataclass
class BoneVectors:
    bones: np.ndarray  # (20, 3), row i-1 is bone i
    lengths: np.ndarray  # (20,)


@dataclass
class PoseAngles:
    flexion: np.ndarray
    abduction: np.ndarray
    palm_inter_bone: np.ndarray  # (4,) angles between adjacent level-1 bones
    palm_dihedral: np.ndarray  # (3,) angles between adjacent palm planes
    bone_lengths: np.ndarray
    root_position: np.ndarray


@dataclass
class LocalFrames:
    frames: np.ndarray  # (20, 3, 3), columns are the x, y, z axes in world space


@dataclass
class SkeletonTransform:
    """Per-joint transforms ``B`` plus the factors they were composed from.

    ``per_joint`` has shape (..., 21, 4, 4). Factor stacks have shape
    (..., 20, 4, 4) with row ``i - 1`` belonging to bone ``i``.
    """

    per_joint: torch.Tensor
    K: torch.Tensor
    F: torch.Tensor
    R: torch.Tensor
    F_prime: torch.Tensor
    K_prime: torch.Tensor
    P: torch.Tensor
    G: torch.Tensor  # (..., 20, 3, 3) accumulated rotation of each local frame
    t: torch.Tensor  # (..., 20, 3) parent tip offsets before palm alignment
    target_flexion: torch.Tensor
    target_abduction: torch.Tensor

    @property
    def matrices(self) -> np.ndarray:
        return self.per_joint.detach().cpu().numpy()

    @classmethod
    def identity(cls, batch_shape=()) -> "SkeletonTransform":
        eye = torch.eye(4, dtype=torch.float64).expand(*batch_shape, NUM_JOINTS, 4, 4).clone()
        bones = eye[..., 1:, :, :].clone()
        zeros = torch.zeros(*batch_shape, NUM_BONES, dtype=torch.float64)
        return cls(
            per_joint=eye,
            K=bones,
            F=bones,
            R=bones,
            F_prime=bones,
            K_prime=bones,
            P=bones,
            G=torch.eye(3, dtype=torch.float64).expand(*batch_shape, NUM_BONES, 3, 3).clone(),
            t=torch.zeros(*batch_shape, NUM_BONES, 3, dtype=torch.float64),
            target_flexion=zeros,
            target_abduction=zeros.clone(),
        )


# --------------------------------------------------------------------------
# operations


def bone_vectors(skeleton) -> BoneVectors:
    j = _as_joints(skeleton)
    _check_finite(j)
    b, lengths = _bones(j)
    return BoneVectors(b.numpy(), lengths.numpy())


def build_local_frames(skeleton) -> LocalFrames:
    """Frames for every bone, anchored at the bone's parent joint.

    Level-1 bones share the palm frame (z along the middle metacarpal, x the
    normal of the index/middle plane). Level-2 frames take z from the
    metacarpal and x from the finger's palm-plane normal; deeper frames
    chain the parent's local rotation.
    """
    return LocalFrames(_analyze(_as_joints(skeleton)).frames.numpy())


def _angle_between(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.atan2(torch.linalg.norm(torch.linalg.cross(a, b), dim=-1), (a * b).sum(-1))


def extract_pose(skeleton) -> PoseAngles:
    j = _as_joints(skeleton)
    g = _analyze(j)
    d, n = g.dirs, g.normals
    inter = torch.stack([_angle_between(d[..., k, :], d[..., k + 1, :]) for k in range(4)], -1)
    dihedral = torch.stack([_angle_between(n[..., k, :], n[..., k + 1, :]) for k in range(3)], -1)
    return PoseAngles(
        flexion=g.flexion.numpy(),
        abduction=g.abduction.numpy(),
        palm_inter_bone=inter.numpy(),
        palm_dihedral=dihedral.numpy(),
        bone_lengths=g.lengths.numpy(),
        root_position=j[..., 0, :].numpy(),
    )


def _homogeneous(batch, rot=None, trans=None, scale=None) -> torch.Tensor:
    out = torch.zeros(*batch, 4, 4, dtype=torch.float64)
    block = torch.eye(3, dtype=torch.float64).expand(*batch, 3, 3) if rot is None else rot
    if scale is not None:
        block = block * scale[..., None, None]
    out[..., :3, :3] = block
    if trans is not None:
        out[..., :3, 3] = trans
    out[..., 3, 3] = 1.0
    return out


def _shortest_arc(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Rotation taking unit ``a`` onto unit ``b`` (a != -b)."""
    v = torch.linalg.cross(a, b)
    c = (a * b).sum(-1)
    if (c <= -1.0 + 1e-12).any():
        raise DegenerateSkeletonError("antiparallel bone directions during palm alignment")
    vx = _skew(v)
    eye = torch.eye(3, dtype=torch.float64).expand_as(vx)
    return eye + vx + (vx @ vx) / (1.0 + c)[..., None, None]


def _skew(v: torch.Tensor) -> torch.Tensor:
    x, y, z = v.unbind(-1)
    zero = torch.zeros_like(x)
    return torch.stack(
        [torch.stack([zero, -z, y], -1), torch.stack([z, zero, -x], -1), torch.stack([-y, x, zero], -1)],
        -2,
    )


def _roll(axis: torch.Tensor, src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
    """Rotation about unit ``axis`` taking ``src`` to ``dst`` (both orthogonal to it)."""
    c = (src * dst).sum(-1)[..., None, None]
    s = (axis * torch.linalg.cross(src, dst)).sum(-1)[..., None, None]
    eye = torch.eye(3, dtype=torch.float64).expand(*axis.shape[:-1], 3, 3)
    outer = axis.unsqueeze(-1) * axis.unsqueeze(-2)
    return c * eye + s * _skew(axis) + (1.0 - c) * outer


def compute_transform(canonical, target) -> SkeletonTransform:
    """Per-joint transforms taking ``canonical`` joints exactly onto ``target``.

    For bone ``i`` the transform is ``P K' F' R F K``: ``K`` moves the bone to
    a unit vector at the origin, ``F``/``R``/``F'`` swap the canonical local
    angles for the target ones and carry the result through the chain,
    ``K'`` scales to the target length and places it at the posed parent
    tip, and ``P`` realigns the finger with the target palm before moving
    the root into place. ``target`` may carry leading batch dimensions.
    """
    jc = _as_joints(canonical)
    jt = _as_joints(target)
    gc = _analyze(jc)
    gt = _analyze(jt)
    batch = jt.shape[:-2]
    jc = jc.expand(*batch, NUM_JOINTS, 3)

    root_c = jc[..., 0, :]
    root_t = jt[..., 0, :]
    palm_c = gc.palm.expand(*batch, 3, 3)
    global_rot = gt.palm @ palm_c.transpose(-1, -2)

    K = [None] * NUM_BONES
    F = [None] * NUM_BONES
    R = [None] * NUM_BONES
    Fp = [None] * NUM_BONES
    Kp = [None] * NUM_BONES
    P = [None] * NUM_BONES
    G = [None] * NUM_BONES
    T = [None] * NUM_BONES
    Q = [None] * NUM_BONES  # accumulated global rotation of each bone
    posed = [None] * NUM_BONES  # posed (pre-alignment) bone vectors

    frames_c = gc.frames.expand(*batch, NUM_BONES, 3, 3)
    flex_c = gc.flexion.expand(*batch, NUM_BONES)
    abd_c = gc.abduction.expand(*batch, NUM_BONES)
    len_c = gc.lengths.expand(*batch, NUM_BONES)
    dir_c = gc.dirs.expand(*batch, NUM_BONES, 3)
    normals_c = gc.normals.expand(*batch, 4, 3)

    for f in range(NUM_FINGERS):
        chain = finger_chain(f)
        for level, i in enumerate(chain, start=1):
            k = i - 1
            frame_c = frames_c[..., k, :, :]
            if level == 1:
                g_rot = global_rot
                t_i = torch.zeros(*batch, 3, dtype=torch.float64)
            else:
                p = chain[level - 2] - 1
                g_rot = Q[p]
                t_i = T[p] + posed[p]
            frame_posed = g_rot @ frame_c
            r_local = _local_rotation(gt.flexion[..., k], gt.abduction[..., k]) @ _local_rotation(
                flex_c[..., k], abd_c[..., k]
            ).transpose(-1, -2)
            Q[k] = frame_posed @ r_local @ frame_c.transpose(-1, -2)
            posed[k] = (Q[k] @ dir_c[..., k, :].unsqueeze(-1)).squeeze(-1) * gt.lengths[..., k, None]
            G[k] = g_rot
            T[k] = t_i
            K[k] = _homogeneous(batch, scale=1.0 / len_c[..., k]) @ _homogeneous(
                batch, trans=-jc[..., int(PARENTS[i]), :]
            )
            F[k] = _homogeneous(batch, rot=frame_c.transpose(-1, -2))
            R[k] = _homogeneous(batch, rot=r_local)
            Fp[k] = _homogeneous(batch, rot=frame_posed)
            Kp[k] = _homogeneous(batch, trans=t_i) @ _homogeneous(batch, scale=gt.lengths[..., k])

        # palm alignment for the whole finger
        l1 = chain[0] - 1
        u = posed[l1] / gt.lengths[..., l1, None]
        arc = _shortest_arc(u, gt.dirs[..., l1, :])
        m = arc @ Q[l1] @ _finger_normal(normals_c, f).unsqueeze(-1)
        m = _unit(m.squeeze(-1))
        roll = _roll(gt.dirs[..., l1, :], m, _finger_normal(gt.normals, f))
        align = _homogeneous(batch, trans=root_t) @ _homogeneous(batch, rot=roll @ arc)
        for i in chain:
            P[i - 1] = align

    factors = [torch.stack(x, -3) for x in (K, F, R, Fp, Kp, P)]
    K_s, F_s, R_s, Fp_s, Kp_s, P_s = factors
    bones_B = P_s @ Kp_s @ Fp_s @ R_s @ F_s @ K_s
    root_B = (
        _homogeneous(batch, trans=root_t)
        @ _homogeneous(batch, rot=global_rot)
        @ _homogeneous(batch, trans=-root_c)
    )
    per_joint = torch.cat([root_B.unsqueeze(-3), bones_B], -3)
    return SkeletonTransform(
        per_joint=per_joint,
        K=K_s,
        F=F_s,
        R=R_s,
        F_prime=Fp_s,
        K_prime=Kp_s,
        P=P_s,
        G=torch.stack(G, -3),
        t=torch.stack(T, -2),
        target_flexion=gt.flexion,
        target_abduction=gt.abduction,
    )


def apply_transform(transform: SkeletonTransform, skeleton):
    """Map joint ``i`` by ``B_i``. Returns a HandSkeleton for unbatched input."""
    j = _as_joints(skeleton)
    B = transform.per_joint
    out = (B[..., :3, :3] @ j.unsqueeze(-1)).squeeze(-1) + B[..., :3, 3]
    if out.dim() == 2 and not out.requires_grad:
        return HandSkeleton(out.numpy())
    return out


def mpjpe(a, b) -> np.ndarray:
    """Mean per-joint position error; batched over leading dimensions."""
    a = a.joints if isinstance(a, HandSkeleton) else a
    b = b.joints if isinstance(b, HandSkeleton) else b
    a = a.detach().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
    b = b.detach().numpy() if isinstance(b, torch.Tensor) else np.asarray(b)
    return np.linalg.norm(a - b, axis=-1).mean(-1)


# --------------------------------------------------------------------------
# angle limits and pose synthesis


@dataclass
class AngleLimits:
    """Per-bone (flexion_min, flexion_max, abduction_min, abduction_max) in radians."""

    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.shape != (NUM_BONES, 4):
            raise ValueError("angle limit table must be (20, 4)")
        if np.any(table[:, 0] >= table[:, 1]) or np.any(table[:, 2] >= table[:, 3]):
            raise ValueError("every angle limit needs min < max")
        self.table = table

    @property
    def flexion(self) -> np.ndarray:
        return self.table[:, :2]

    @property
    def abduction(self) -> np.ndarray:
        return self.table[:, 2:]

    @classmethod
    def default(cls) -> "AngleLimits":
        # Level-1 rows are measured in the palm frame; the rest in bone frames.
        level1 = [
            (-0.9, 0.9, 0.2, 1.4),
            (-0.5, 0.5, 0.0, 0.6),
            (-0.5, 0.5, -0.3, 0.3),
            (-0.5, 0.5, -0.5, 0.1),
            (-0.6, 0.6, -0.8, 0.0),
        ]
        thumb = (-0.5, 1.2, -0.5, 0.5)
        level2 = (-0.3, 1.6, -0.35, 0.35)
        distal = (-0.1, 1.7, -0.1, 0.1)
        rows = list(level1)
        for level in (2, 3, 4):
            for f in range(NUM_FINGERS):
                if f == 0:
                    rows.append(thumb)
                else:
                    rows.append(level2 if level == 2 else distal)
        return cls(np.array(rows))


def skeleton_from_angles(flexion, abduction, lengths, palm_rotation=None, root=None) -> HandSkeleton:
    """Build a skeleton from local angles (the forward direction of ``extract_pose``).

    Level-1 bones are placed by their angles in ``palm_rotation`` (a 3x3
    frame, columns x, y, z); deeper bones use the frames this module
    derives from the partially built skeleton.
    """
    flexion = np.asarray(flexion, dtype=np.float64)
    abduction = np.asarray(abduction, dtype=np.float64)
    lengths = np.asarray(lengths, dtype=np.float64)
    palm = np.eye(3) if palm_rotation is None else np.asarray(palm_rotation, dtype=np.float64)
    joints = np.zeros((NUM_JOINTS, 3))
    joints[0] = 0.0 if root is None else np.asarray(root, dtype=np.float64)
    for f in range(NUM_FINGERS):
        i = joint_index(f, 1)
        joints[i] = joints[0] + lengths[i - 1] * palm @ direction(flexion[i - 1], abduction[i - 1])
    d = torch.as_tensor((joints[1:6] - joints[0]) / lengths[:5, None])
    normals = _palm_normals(d)
    for f in range(NUM_FINGERS):
        chain = finger_chain(f)
        frame = _frame_from(d[f], _finger_normal(normals, f)).numpy()
        for level in (2, 3, 4):
            i, p = chain[level - 1], chain[level - 2]
            joints[i] = joints[p] + lengths[i - 1] * frame @ direction(flexion[i - 1], abduction[i - 1])
            frame = frame @ _local_rotation(
                torch.tensor(flexion[i - 1]), torch.tensor(abduction[i - 1])
            ).numpy()
    return HandSkeleton(joints)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def sample_pose(rng: np.random.Generator, canonical: Optional[HandSkeleton] = None,
                limits: Optional[AngleLimits] = None, length_jitter: float = 0.3,
                rotate: bool = True, root_scale: float = 0.1) -> HandSkeleton:
    """Random skeleton with angles inside ``limits`` and lengths within +-jitter."""
    canonical = canonical_skeleton() if canonical is None else canonical
    limits = AngleLimits.default() if limits is None else limits
    lengths = bone_vectors(canonical).lengths * rng.uniform(1 - length_jitter, 1 + length_jitter, NUM_BONES)
    flex = rng.uniform(limits.flexion[:, 0], limits.flexion[:, 1])
    abd = rng.uniform(limits.abduction[:, 0], limits.abduction[:, 1])
    palm = random_rotation(rng) if rotate else np.eye(3)
    root = rng.normal(scale=root_scale, size=3)
    return skeleton_from_angles(flex, abd, lengths, palm, root)


def canonical_palm_rotation() -> np.ndarray:
    """Palm frame of a hand with fingers along +y and the palm facing -z."""
    return np.array([[0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]])
