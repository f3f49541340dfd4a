"""Triangle meshes with per-face UVs: capsule-hand generator, OBJ I/O and
point queries (generalized winding number, closest point on surface)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .kinematics import NUM_BONES, PARENTS, LEVELS, HandSkeleton


@dataclass
class CanonicalMesh:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray  # (M, 3) int64
    face_uvs: np.ndarray  # (M, 3, 2) float64

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.face_uvs = np.ascontiguousarray(self.face_uvs, dtype=np.float64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be (M, 3)")
        if self.face_uvs.shape != (len(self.faces), 3, 2):
            raise ValueError("face_uvs must be (M, 3, 2)")

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def is_watertight(self) -> bool:
        edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def validate(self) -> None:
        if not self.is_watertight():
            raise ValueError("mesh is not watertight")
        if np.any(self.face_uvs < 0) or np.any(self.face_uvs > 1):
            raise ValueError("UV coordinates must lie in [0, 1]")

    def signed_volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def default_bone_radii() -> np.ndarray:
    radii = np.empty(NUM_BONES)
    for bone in range(1, NUM_BONES + 1):
        level = LEVELS[bone]
        radii[bone - 1] = {1: 0.012, 2: 0.0095, 3: 0.0085, 4: 0.0075}[int(level)]
    radii[0] = 0.013
    return radii


def capsule_mesh(a, b, radius: float, segments: int = 16, cap_rings: int = 4,
                 u_range=(0.0, 1.0)):
    """Closed capsule around segment ``a``-``b`` with cylindrical UVs.

    Returns (vertices, faces, face_uvs); faces are oriented outward.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    length = np.linalg.norm(axis)
    axis = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)

    # latitude rows (excluding poles): bottom hemisphere up to the equator at a,
    # then top hemisphere from the equator at b
    rows = []
    for k in range(1, cap_rings + 1):
        phi = -0.5 * math.pi + 0.5 * math.pi * k / cap_rings
        rows.append((a, phi))
    for k in range(0, cap_rings):
        phi = 0.5 * math.pi * k / cap_rings
        rows.append((b, phi))
    theta = 2 * math.pi * np.arange(segments) / segments
    ring_dirs = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2

    verts = [a - radius * axis]
    for center, phi in rows:
        verts.extend(center + radius * (math.cos(phi) * ring_dirs + math.sin(phi) * axis))
    verts.append(b + radius * axis)
    verts = np.array(verts)

    n_rows = len(rows)
    total_rows = n_rows + 2
    v_of_row = np.arange(total_rows) / (total_rows - 1)
    u0, u1 = u_range

    def ring(r, s):
        return 1 + r * segments + (s % segments)

    def uv(row, s):
        return (u0 + (u1 - u0) * s / segments, v_of_row[row])

    faces, uvs = [], []
    top = len(verts) - 1
    for s in range(segments):
        faces.append((0, ring(0, s + 1), ring(0, s)))
        uvs.append((uv(0, s + 0.5), uv(1, s + 1), uv(1, s)))
    for r in range(n_rows - 1):
        for s in range(segments):
            v00, v01 = ring(r, s), ring(r, s + 1)
            v10, v11 = ring(r + 1, s), ring(r + 1, s + 1)
            faces.append((v00, v01, v11))
            uvs.append((uv(r + 1, s), uv(r + 1, s + 1), uv(r + 2, s + 1)))
            faces.append((v00, v11, v10))
            uvs.append((uv(r + 1, s), uv(r + 2, s + 1), uv(r + 2, s)))
    for s in range(segments):
        faces.append((top, ring(n_rows - 1, s), ring(n_rows - 1, s + 1)))
        uvs.append((uv(total_rows - 1, s + 0.5), uv(total_rows - 2, s), uv(total_rows - 2, s + 1)))
    faces = np.array(faces, dtype=np.int64)
    uvs = np.array(uvs, dtype=np.float64)
    t = verts[faces]
    if np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() < 0:
        faces = faces[:, ::-1].copy()
        uvs = uvs[:, ::-1].copy()
    return verts, faces, uvs


def capsule_hand(skeleton: HandSkeleton, radii=None, segments: int = 16,
                 cap_rings: int = 4) -> CanonicalMesh:
    """One capsule per bone, concatenated into a single closed (overlapping) mesh.

    Each capsule owns a vertical UV strip of width 1/20.
    """
    radii = default_bone_radii() if radii is None else np.asarray(radii, dtype=np.float64)
    verts, faces, uvs = [], [], []
    offset = 0
    for bone in range(1, NUM_BONES + 1):
        a = skeleton.joints[PARENTS[bone]]
        b = skeleton.joints[bone]
        v, f, uv = capsule_mesh(
            a, b, radii[bone - 1], segments, cap_rings,
            u_range=((bone - 1) / NUM_BONES, bone / NUM_BONES),
        )
        verts.append(v)
        faces.append(f + offset)
        uvs.append(uv)
        offset += len(v)
    return CanonicalMesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(uvs))


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> CanonicalMesh:
    """Axis-aligned box with planar UVs per face."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.float64)
    verts = lo + corners * (hi - lo)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces, uvs = [], []
    quad_uv = [(0, 0), (1, 0), (1, 1), (0, 1)]
    for q in quads:
        faces += [(q[0], q[1], q[2]), (q[0], q[2], q[3])]
        uvs += [(quad_uv[0], quad_uv[1], quad_uv[2]), (quad_uv[0], quad_uv[2], quad_uv[3])]
    mesh = CanonicalMesh(verts, np.array(faces), np.array(uvs, dtype=np.float64))
    if mesh.signed_volume() < 0:
        mesh = CanonicalMesh(verts, mesh.faces[:, ::-1], mesh.face_uvs[:, ::-1])
    return mesh


# --------------------------------------------------------------------------
# OBJ


def save_obj(mesh: CanonicalMesh, path) -> None:
    uv_flat = mesh.face_uvs.reshape(-1, 2)
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in uv_flat:
            fh.write(f"vt {float(t[0])!r} {float(t[1])!r}\n")
        for k, f in enumerate(mesh.faces):
            a, b, c = f + 1
            fh.write(f"f {a}/{3 * k + 1} {b}/{3 * k + 2} {c}/{3 * k + 3}\n")


def load_obj(path) -> CanonicalMesh:
    """Read a triangulated OBJ with texture coordinates."""
    verts, tex, faces, face_uvs = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            tex.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError("only triangulated OBJ files are supported")
            vi, ti = [], []
            for item in parts[1:]:
                fields = item.split("/")
                if len(fields) < 2 or not fields[1]:
                    raise ValueError("OBJ faces need texture coordinates")
                vi.append(int(fields[0]) - 1)
                ti.append(int(fields[1]) - 1)
            faces.append(vi)
            face_uvs.append([tex[t] for t in ti])
    return CanonicalMesh(np.array(verts), np.array(faces), np.array(face_uvs))


# --------------------------------------------------------------------------
# point queries


def _components(mesh: CanonicalMesh):
    """Face order grouped by connected component, offsets and bounding spheres."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    f = mesh.faces
    n = len(mesh.vertices)
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, vlabel = connected_components(graph, directed=False)
    flabel = vlabel[f[:, 0]]
    order = np.argsort(flabel, kind="stable")
    counts = np.bincount(flabel)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    tris = np.ascontiguousarray(mesh.vertices[f[order]])
    centers = np.empty((len(counts), 3))
    radii = np.empty(len(counts))
    for k in range(len(counts)):
        pts = tris[offsets[k]:offsets[k + 1]].reshape(-1, 3)
        lo, hi = pts.min(0), pts.max(0)
        centers[k] = 0.5 * (lo + hi)
        radii[k] = np.linalg.norm(pts - centers[k], axis=1).max() * (1 + 1e-9) + 1e-12
    return order, offsets, tris, centers, radii


@numba.njit(cache=True)
def _solid_angle(px, py, pz, tris, k):
    ax = tris[k, 0, 0] - px
    ay = tris[k, 0, 1] - py
    az = tris[k, 0, 2] - pz
    bx = tris[k, 1, 0] - px
    by = tris[k, 1, 1] - py
    bz = tris[k, 1, 2] - pz
    cx = tris[k, 2, 0] - px
    cy = tris[k, 2, 1] - py
    cz = tris[k, 2, 2] - pz
    la = math.sqrt(ax * ax + ay * ay + az * az)
    lb = math.sqrt(bx * bx + by * by + bz * bz)
    lc = math.sqrt(cx * cx + cy * cy + cz * cz)
    det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
    den = (la * lb * lc + (ax * bx + ay * by + az * bz) * lc
           + (ax * cx + ay * cy + az * cz) * lb + (bx * cx + by * cy + bz * cz) * la)
    return 2.0 * math.atan2(det, den)


@numba.njit(parallel=True, cache=True)
def _winding_kernel(points, tris, offsets, centers, radii):
    n = points.shape[0]
    out = np.empty(n)
    for i in numba.prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        total = 0.0
        for c in range(centers.shape[0]):
            dx = px - centers[c, 0]
            dy = py - centers[c, 1]
            dz = pz - centers[c, 2]
            # a closed component contributes exactly zero outside its hull
            if dx * dx + dy * dy + dz * dz > radii[c] * radii[c]:
                continue
            for k in range(offsets[c], offsets[c + 1]):
                total += _solid_angle(px, py, pz, tris, k)
        out[i] = total / (4.0 * math.pi)
    return out


def winding_number(points, mesh: CanonicalMesh, prune: bool = True) -> np.ndarray:
    """Generalized winding number of ``mesh`` around each point.

    With ``prune`` (valid for watertight meshes) closed components whose
    bounding sphere excludes the point are skipped.
    """
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    if prune:
        _, offsets, tris, centers, radii = _mesh_components(mesh)
    else:
        tris = np.ascontiguousarray(mesh.triangles)
        offsets = np.array([0, len(tris)], dtype=np.int64)
        centers = np.zeros((1, 3))
        radii = np.array([np.inf])
    return _winding_kernel(pts, tris, offsets, centers, radii)


def _mesh_components(mesh: CanonicalMesh):
    cached = getattr(mesh, "_component_cache", None)
    if cached is None:
        cached = _components(mesh)
        object.__setattr__(mesh, "_component_cache", cached)
    return cached


def contains(points, mesh: CanonicalMesh, threshold: float = 0.5) -> np.ndarray:
    return winding_number(points, mesh) > threshold


@numba.njit(cache=True)
def _closest_on_triangle(p, a, b, c):
    """Closest point to p on triangle abc; returns barycentric (wa, wb, wc)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@numba.njit(parallel=True, cache=True)
def _closest_kernel(points, tris, face_ids, offsets, centers, radii):
    n = points.shape[0]
    n_comp = centers.shape[0]
    face = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    dist = np.empty(n)
    for i in numba.prange(n):
        p = points[i]
        lower = np.empty(n_comp)
        for c in range(n_comp):
            dx = p[0] - centers[c, 0]
            dy = p[1] - centers[c, 1]
            dz = p[2] - centers[c, 2]
            lower[c] = max(math.sqrt(dx * dx + dy * dy + dz * dz) - radii[c], 0.0)
        visit = np.argsort(lower)
        best = np.inf
        bf = -1
        b0 = b1 = b2 = 0.0
        for c in visit:
            if lower[c] * lower[c] > best:
                break
            for k in range(offsets[c], offsets[c + 1]):
                wa, wb, wc = _closest_on_triangle(p, tris[k, 0], tris[k, 1], tris[k, 2])
                qx = wa * tris[k, 0, 0] + wb * tris[k, 1, 0] + wc * tris[k, 2, 0] - p[0]
                qy = wa * tris[k, 0, 1] + wb * tris[k, 1, 1] + wc * tris[k, 2, 1] - p[1]
                qz = wa * tris[k, 0, 2] + wb * tris[k, 1, 2] + wc * tris[k, 2, 2] - p[2]
                d2 = qx * qx + qy * qy + qz * qz
                fid = face_ids[k]
                if d2 < best or (d2 == best and fid < bf):
                    best = d2
                    bf = fid
                    b0, b1, b2 = wa, wb, wc
        face[i] = bf
        bary[i, 0] = b0
        bary[i, 1] = b1
        bary[i, 2] = b2
        dist[i] = math.sqrt(best)
    return face, bary, dist


def closest_points(points, mesh: CanonicalMesh):
    """Nearest face, barycentric coordinates and distance for each point.

    Exact ties keep the lowest face index.
    """
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    order, offsets, tris, centers, radii = _mesh_components(mesh)
    return _closest_kernel(pts, tris, order, offsets, centers, radii)


def segment_distances(points, starts, ends) -> np.ndarray:
    """Distances from each point to each segment, shape (n_points, n_segments)."""
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    a = np.asarray(starts, dtype=np.float64)[None]
    ab = np.asarray(ends, dtype=np.float64)[None] - a
    t = np.einsum("psk,psk->ps", p - a, np.broadcast_to(ab, (p.shape[0],) + ab.shape[1:]))
    t = np.clip(t / np.einsum("psk,psk->ps", ab, ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def bone_distances(points, skeleton: HandSkeleton) -> np.ndarray:
    j = skeleton.joints
    return segment_distances(points, j[PARENTS[1:]], j[1:])
