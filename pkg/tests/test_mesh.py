import numpy as np
import pytest

from oracles import point_triangle_distance

from handsplat.mesh import (
    box_mesh, capsule_hand, capsule_mesh, closest_points, contains, load_obj, save_obj, segment_distances,
    winding_number,
)


def test_box_is_closed_with_outward_normals():
    m = box_mesh()
    assert m.is_watertight()
    assert m.signed_volume() == pytest.approx(1.0)
    m.validate()


def test_capsule_hand_watertight(canonical):
    m = capsule_hand(canonical)
    assert m.is_watertight()
    assert m.signed_volume() > 0
    assert m.face_uvs.min() >= 0 and m.face_uvs.max() <= 1
    assert len(m.faces) == 20 * len(capsule_mesh([0, 0, 0], [0, 0, 1], 0.1)[1])


def test_winding_number_box(rng):
    m = box_mesh()
    inside = rng.uniform(0.05, 0.95, (200, 3))
    outside = rng.uniform(1.05, 2.0, (200, 3)) * rng.choice([-1, 1], (200, 3))
    assert np.allclose(winding_number(inside, m), 1.0, atol=1e-12)
    assert np.allclose(winding_number(outside, m), 0.0, atol=1e-12)
    assert contains(inside, m).all() and not contains(outside, m).any()


def test_winding_pruning_matches_full_sum(canonical, rng):
    m = capsule_hand(canonical)
    lo, hi = m.vertices.min(0), m.vertices.max(0)
    pts = rng.uniform(lo - 0.01, hi + 0.01, (2000, 3))
    assert np.allclose(winding_number(pts, m), winding_number(pts, m, prune=False), atol=1e-10)


def test_closest_points_match_exhaustive_search(canonical, rng):
    m = capsule_hand(canonical)
    tris = m.triangles
    lo, hi = m.vertices.min(0), m.vertices.max(0)
    pts = rng.uniform(lo, hi, (12, 3))
    face, bary, dist = closest_points(pts, m)
    for k, p in enumerate(pts):
        results = [point_triangle_distance(p, *t) for t in tris]
        d_best = min(r[0] for r in results)
        assert dist[k] == pytest.approx(d_best, abs=1e-12)
        q = bary[k] @ tris[face[k]]
        assert np.linalg.norm(p - q) == pytest.approx(d_best, abs=1e-12)


def test_segment_distances():
    d = segment_distances([[0, 1, 0], [2, 0, 0], [-1, 0, 0]], [[0, 0, 0]], [[1, 0, 0]])
    assert np.allclose(d[:, 0], [1, 1, 1])


def test_obj_round_trip(tmp_path, canonical):
    m = capsule_hand(canonical)
    save_obj(m, tmp_path / "m.obj")
    back = load_obj(tmp_path / "m.obj")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)
    assert np.array_equal(back.face_uvs, m.face_uvs)


def test_obj_without_uvs_rejected(tmp_path):
    (tmp_path / "m.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(ValueError):
        load_obj(tmp_path / "m.obj")
