import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from handsplat.kinematics import (
    LEVELS, NUM_BONES, PARENTS, AngleLimits, DegeneratePalmError, DegenerateSkeletonError, GimbalError,
    HandSkeleton, SkeletonTransform, apply_transform, bone_vectors, build_local_frames, canonical_skeleton,
    compute_transform, direction, extract_pose, joint_index, load_skeleton, mpjpe, permute_joints,
    random_rotation, sample_pose, save_skeleton, skeleton_from_angles,
)


def rigid(skel, rot, trans):
    return HandSkeleton(skel.joints @ rot.T + trans)


def constrained_palm_pose(rng):
    """Angles for which the palm frame equals the construction frame.

    With the middle metacarpal at (0, 0) and the index metacarpal at zero
    flexion and positive abduction, the derived palm frame is the identity,
    so level-1 angles are recovered exactly as well.
    """
    lim = AngleLimits.default()
    flex = rng.uniform(lim.flexion[:, 0], lim.flexion[:, 1])
    abd = rng.uniform(lim.abduction[:, 0], lim.abduction[:, 1])
    flex[2], abd[2] = 0.0, 0.0
    flex[1], abd[1] = 0.0, rng.uniform(0.05, 0.5)
    return flex, abd


# --------------------------------------------------------------------------
# topology and skeleton files


def test_topology_tables():
    assert PARENTS[0] == -1
    assert all(PARENTS[i] == 0 for i in range(1, 6))
    assert all(PARENTS[i] == i - 5 for i in range(6, 21))
    assert list(LEVELS) == [0] + [1] * 5 + [2] * 5 + [3] * 5 + [4] * 5
    assert joint_index(0, 1) == 1 and joint_index(4, 4) == 20


def test_skeleton_validation():
    with pytest.raises(ValueError):
        HandSkeleton(np.zeros((20, 3)))
    bad = canonical_skeleton().joints.copy()
    bad[3, 1] = np.nan
    with pytest.raises(ValueError):
        HandSkeleton(bad)


def test_skeleton_json_round_trip_is_bit_exact(tmp_path, rng):
    skel = sample_pose(rng)
    path = tmp_path / "s.json"
    save_skeleton(skel, path)
    data = json.loads(path.read_text())
    assert data["format"] == "jg21" and data["units"] == "m" and len(data["joints"]) == 21
    back = load_skeleton(path)
    assert np.array_equal(back.joints, skel.joints)


def test_malformed_skeleton_json(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"format": "jg21", "units": "m", "joints": [[0, 0, 0]] * 20}))
    with pytest.raises(ValueError):
        load_skeleton(path)


def test_permute_joints_inverse(rng):
    j = sample_pose(rng).joints
    order = rng.permutation(21)
    source = np.empty_like(j)
    source[order] = j  # our joint i sits at source row order[i]
    assert np.array_equal(permute_joints(source, order), j)
    with pytest.raises(ValueError):
        permute_joints(source, np.zeros(21, dtype=int))


# --------------------------------------------------------------------------
# bone vectors


def test_bone_vectors_canonical(canonical):
    bv = bone_vectors(canonical)
    assert bv.bones.shape == (NUM_BONES, 3)
    assert np.all(bv.lengths > 0)
    for i in range(1, 21):
        assert np.array_equal(bv.bones[i - 1], canonical.joints[i] - canonical.joints[PARENTS[i]])
    assert np.allclose(np.linalg.norm(bv.bones, axis=1), bv.lengths, rtol=0, atol=1e-15)


def test_bone_vectors_translation_invariant(canonical):
    moved = HandSkeleton(canonical.joints + np.array([1.0, 0.0, 0.0]))
    assert np.allclose(bone_vectors(moved).bones, bone_vectors(canonical).bones, atol=1e-15)


def test_bone_vectors_scale_about_root(canonical):
    root = canonical.joints[0]
    doubled = HandSkeleton(root + 2.0 * (canonical.joints - root))
    a, b = bone_vectors(canonical), bone_vectors(doubled)
    assert np.allclose(b.lengths, 2 * a.lengths, rtol=1e-15)
    assert np.allclose(b.bones / b.lengths[:, None], a.bones / a.lengths[:, None], atol=1e-15)


def test_zero_length_bone_is_an_error(canonical):
    j = canonical.joints.copy()
    j[12] = j[7]
    with pytest.raises(DegenerateSkeletonError):
        bone_vectors(HandSkeleton(j))


# --------------------------------------------------------------------------
# local frames


def test_frames_are_rotations(canonical, rng):
    for skel in [canonical] + [sample_pose(rng) for _ in range(20)]:
        fr = build_local_frames(skel).frames
        assert fr.shape == (NUM_BONES, 3, 3)
        for m in fr:
            assert np.allclose(m @ m.T, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(m) - 1.0) < 1e-9


def test_frame_z_axis_is_parent_bone(rng):
    for _ in range(20):
        skel = sample_pose(rng)
        bv = bone_vectors(skel)
        fr = build_local_frames(skel).frames
        for i in range(6, 21):
            parent_dir = bv.bones[PARENTS[i] - 1] / bv.lengths[PARENTS[i] - 1]
            assert np.allclose(fr[i - 1][:, 2], parent_dir, atol=1e-12)


def test_palm_frame_axes(rng):
    skel = sample_pose(rng)
    bv = bone_vectors(skel)
    palm = build_local_frames(skel).frames[0]
    d2, d3 = bv.bones[1] / bv.lengths[1], bv.bones[2] / bv.lengths[2]
    assert np.allclose(palm[:, 2], d3, atol=1e-12)
    n = np.cross(d2, d3)
    assert np.allclose(palm[:, 0], n / np.linalg.norm(n), atol=1e-12)
    # every level-1 bone shares the palm frame
    assert np.allclose(build_local_frames(skel).frames[:5], palm, atol=0)


def test_frames_rotate_with_skeleton(rng):
    skel = sample_pose(rng)
    rot = random_rotation(rng)
    a = build_local_frames(skel).frames
    b = build_local_frames(rigid(skel, rot, rng.normal(size=3))).frames
    assert np.allclose(b, rot @ a, atol=1e-12)


def test_collinear_palm_is_an_error(canonical):
    j = canonical.joints.copy()
    # put the index metacarpal on the middle metacarpal's line
    j[2] = j[0] + 0.9 * (j[3] - j[0])
    with pytest.raises(DegeneratePalmError):
        build_local_frames(HandSkeleton(j))


# --------------------------------------------------------------------------
# angles


def test_direction_parameterization():
    assert np.allclose(direction(0.0, 0.0), [0, 0, 1])
    assert np.allclose(direction(np.pi / 2, 0.0), [1, 0, 0], atol=1e-16)
    assert np.allclose(direction(0.0, np.pi / 2), [0, 1, 0], atol=1e-16)
    f, a = 0.3, -0.7
    d = direction(f, a)
    assert abs(np.linalg.norm(d) - 1.0) < 1e-15
    # flexion is the angle of the xz projection from z, abduction the elevation out of xz
    assert np.isclose(np.arctan2(d[0], d[2]), f)
    assert np.isclose(np.arctan2(d[1], np.hypot(d[0], d[2])), a)


def test_zero_angles_bone_along_local_z():
    flex = np.zeros(NUM_BONES)
    abd = np.zeros(NUM_BONES)
    abd[1] = 0.3  # keeps the palm plane defined
    abd[0], abd[3], abd[4] = 0.6, -0.3, -0.6
    lengths = np.full(NUM_BONES, 0.03)
    pose = extract_pose(skeleton_from_angles(flex, abd, lengths))
    assert np.allclose(pose.flexion[5:], 0.0, atol=1e-12)
    assert np.allclose(pose.abduction[5:], 0.0, atol=1e-12)


def test_quarter_turn_flexion():
    flex = np.zeros(NUM_BONES)
    abd = np.array([0.6, 0.3, 0.0, -0.3, -0.6] + [0.0] * 15)
    flex[7] = np.pi / 2  # middle finger, level 2
    pose = extract_pose(skeleton_from_angles(flex, abd, np.full(NUM_BONES, 0.03)))
    assert np.isclose(pose.flexion[7], np.pi / 2, atol=1e-12)
    assert abs(pose.abduction[7]) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_angle_round_trip(seed):
    rng = np.random.default_rng(seed)
    flex, abd = constrained_palm_pose(rng)
    lengths = rng.uniform(0.015, 0.09, NUM_BONES)
    skel = skeleton_from_angles(flex, abd, lengths, root=rng.normal(size=3))
    pose = extract_pose(skel)
    assert np.allclose(pose.flexion, flex, atol=1e-9)
    assert np.allclose(pose.abduction, abd, atol=1e-9)
    assert np.allclose(pose.bone_lengths, lengths, atol=1e-12)
    assert np.allclose(pose.root_position, skel.joints[0])


def test_pose_angle_ranges(rng):
    for _ in range(50):
        pose = extract_pose(sample_pose(rng))
        for arr in (pose.flexion, pose.abduction):
            assert np.all(arr > -np.pi) and np.all(arr <= np.pi)
        for arr in (pose.palm_inter_bone, pose.palm_dihedral):
            assert np.all(arr >= 0) and np.all(arr <= np.pi)
        assert pose.palm_inter_bone.shape == (4,) and pose.palm_dihedral.shape == (3,)


def test_palm_inter_bone_angles(rng):
    skel = sample_pose(rng)
    bv = bone_vectors(skel)
    d = bv.bones[:5] / bv.lengths[:5, None]
    expected = [np.arccos(np.clip(d[k] @ d[k + 1], -1, 1)) for k in range(4)]
    assert np.allclose(extract_pose(skel).palm_inter_bone, expected, atol=1e-7)


def test_gimbal_degenerate_bone_reports_joint():
    flex = np.zeros(NUM_BONES)
    abd = np.array([0.6, 0.3, 0.0, -0.3, -0.6] + [0.0] * 15)
    abd[6] = np.pi / 2  # index level-2 bone along its local y axis
    skel = skeleton_from_angles(flex, abd, np.full(NUM_BONES, 0.03))
    with pytest.raises(GimbalError) as info:
        extract_pose(skel)
    assert info.value.joint == 7


# --------------------------------------------------------------------------
# transforms


def test_identity_target_reproduces_canonical(canonical):
    t = compute_transform(canonical, canonical)
    out = apply_transform(t, canonical)
    assert np.abs(out.joints - canonical.joints).max() < 1e-12


def test_pure_length_scaling(canonical):
    root = canonical.joints[0]
    target = HandSkeleton(root + 2.0 * (canonical.joints - root))
    out = apply_transform(compute_transform(canonical, target), canonical)
    assert np.abs(out.joints - target.joints).max() < 1e-12


def test_random_targets_exact(canonical, rng):
    targets = np.stack([sample_pose(rng).joints for _ in range(200)])
    posed = apply_transform(compute_transform(canonical, targets), canonical)
    assert mpjpe(posed, targets).max() <= 1e-6
    assert np.abs(posed.numpy() - targets).max() < 1e-12


def test_batched_matches_single(canonical, rng):
    targets = np.stack([sample_pose(rng).joints for _ in range(4)])
    batched = compute_transform(canonical, targets).per_joint
    for k in range(4):
        single = compute_transform(canonical, targets[k]).per_joint
        assert torch.allclose(batched[k], single, atol=1e-14)


def test_rigid_equivariance(canonical, rng):
    target = sample_pose(rng)
    rot, trans = random_rotation(rng), rng.normal(size=3)
    moved = rigid(target, rot, trans)
    a = apply_transform(compute_transform(canonical, target), canonical).joints
    b = apply_transform(compute_transform(canonical, moved), canonical).joints
    assert mpjpe(b, a @ rot.T + trans) <= 1e-6


def test_transforms_are_scaled_rotations(canonical, rng):
    B = compute_transform(canonical, sample_pose(rng)).per_joint.numpy()
    for m in B:
        r = m[:3, :3]
        s = np.cbrt(np.linalg.det(r))
        assert s > 0
        assert np.allclose(r @ r.T, s * s * np.eye(3), atol=1e-12)
        assert np.allclose(m[3], [0, 0, 0, 1])


def test_factor_consistency(canonical, rng):
    t = compute_transform(canonical, sample_pose(rng))
    bv = bone_vectors(canonical)
    pose_c = extract_pose(canonical)
    for i in range(1, 21):
        k = i - 1
        jc = np.append(canonical.joints[i], 1.0)
        unit = t.K[k].numpy() @ jc
        assert np.allclose(unit[:3], bv.bones[k] / bv.lengths[k], atol=1e-12)
        local = t.F[k].numpy() @ unit
        assert np.allclose(local[:3], direction(pose_c.flexion[k], pose_c.abduction[k]), atol=1e-12)


def test_chain_consistency(canonical, rng):
    target = sample_pose(rng)
    t = compute_transform(canonical, target)
    for i in range(1, 21):
        k = i - 1
        tip = t.P[k].numpy() @ np.append(t.t[k].numpy(), 1.0)
        assert np.allclose(tip[:3], target.joints[PARENTS[i]], atol=1e-9)


def test_identity_transform_object(canonical):
    ident = SkeletonTransform.identity()
    assert np.array_equal(apply_transform(ident, canonical).joints, canonical.joints)


def test_pure_translation(canonical):
    shift = np.array([0.1, -0.2, 0.3])
    ident = SkeletonTransform.identity()
    per_joint = ident.per_joint.clone()
    per_joint[:, :3, 3] = torch.as_tensor(shift)
    moved = apply_transform(SkeletonTransform(per_joint, *[getattr(ident, n) for n in (
        "K", "F", "R", "F_prime", "K_prime", "P", "G", "t", "target_flexion", "target_abduction")]), canonical)
    assert np.allclose(moved.joints, canonical.joints + shift, atol=1e-15)


def test_degenerate_target_propagates(canonical):
    j = canonical.joints.copy()
    j[9] = j[4]
    with pytest.raises(DegenerateSkeletonError):
        compute_transform(canonical, HandSkeleton(j))


def test_posed_joint_jacobian_matches_finite_differences(canonical, rng):
    target = torch.tensor(sample_pose(rng).joints, requires_grad=True)

    def f(x):
        return compute_transform(canonical, x).per_joint[..., :3, :].reshape(-1)

    jac = torch.autograd.functional.jacobian(f, target).reshape(-1, 63).numpy()
    h = 1e-6
    x0 = target.detach().numpy().reshape(-1)
    fd = np.empty_like(jac)
    for c in range(63):
        xp, xm = x0.copy(), x0.copy()
        xp[c] += h
        xm[c] -= h
        fd[:, c] = (f(torch.tensor(xp.reshape(21, 3))).numpy() - f(torch.tensor(xm.reshape(21, 3))).numpy()) / (2 * h)
    scale = np.maximum(np.abs(fd), 1.0)
    assert np.max(np.abs(jac - fd) / scale) < 1e-4
    # the posed joints themselves track the target one-to-one
    posed = apply_transform(compute_transform(canonical, target), canonical)
    jp = torch.autograd.functional.jacobian(
        lambda x: apply_transform(compute_transform(canonical, x), canonical).reshape(-1), target)
    assert np.allclose(jp.reshape(63, 63).numpy(), np.eye(63), atol=1e-9)
    assert posed.requires_grad


def test_angle_limits_validation():
    table = AngleLimits.default().table.copy()
    table[4, 0] = table[4, 1]
    with pytest.raises(ValueError):
        AngleLimits(table)


def test_sample_pose_respects_limits(rng):
    lim = AngleLimits.default()
    canonical = canonical_skeleton()
    for _ in range(30):
        skel = sample_pose(rng, canonical, lim, rotate=False)
        lengths = bone_vectors(skel).lengths
        ratio = lengths / bone_vectors(canonical).lengths
        assert np.all(ratio >= 0.7 - 1e-12) and np.all(ratio <= 1.3 + 1e-12)
