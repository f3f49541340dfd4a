"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are printed
even when output capture is on.
"""
import os
import time

import numpy as np
import pytest
import torch

from oracles import composite_reference, shadow_reference

from handsplat.appearance import (AppearanceConfig, AppearanceModel, angular_features, normalize_angles,
                                  positional_encode)
from handsplat.avatar import HandAvatar, ShadowSettings
from handsplat.bench import run_isolated
from handsplat.cli import main, validate_transform
from handsplat.kinematics import (LEVELS, NUM_BONES, NUM_JOINTS, PARENTS, AngleLimits, compute_transform,
                                  sample_pose)
from handsplat.optimizer import TrainConfig, evaluate, load_dataset, loss, train
from handsplat.renderer import Camera, GaussianSet, render
from handsplat.shadow import ShadowParams, build_kernel, shadow_mask
from handsplat.synth import build_assets, load_assets, mild_pose, ring_camera, synthesize
from handsplat.template import WeightField, pose_gaussians


@pytest.fixture
def report(capsys):
    def emit(criterion: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        return ok
    return emit


# --------------------------------------------------------------------------
# 1. zero-error transformation


def test_criterion_1_zero_error_transformation(report):
    torch.set_num_threads(1)
    validate_transform(10, 0)  # warm up lazy imports
    start = time.perf_counter()
    res = validate_transform(1000, 0)
    elapsed = time.perf_counter() - start
    ok = res["max_mpjpe"] <= 1e-6 and elapsed < 2.0
    report("1", ok, f"max MPJPE {res['max_mpjpe']:.2e} m over 1000 targets in {elapsed:.2f} s")
    assert res["max_mpjpe"] <= 1e-6
    assert elapsed < 2.0


# --------------------------------------------------------------------------
# 2. substitute: criterion 1 plus the skinning rigid-limit and Lipschitz suites


def test_criterion_2_skinning_substitute(report, small_assets):
    t, field = small_assets.template, small_assets.field
    rng = np.random.default_rng(2)
    tr = compute_transform(small_assets.canonical, sample_pose(rng, small_assets.canonical))
    # rigid limit: a one-hot weight field moves every point with that joint's transform
    rigid_err = 0.0
    for j in (0, 7, 19):
        w = np.zeros((8, 8, 8, NUM_JOINTS), np.float32)
        w[..., j] = 1.0
        x = pose_gaussians(t, WeightField(w, field.bbox), tr)
        b = tr.per_joint[j].numpy()
        rigid_err = max(rigid_err, np.abs(x - (t.positions.astype(np.float64) @ b[:3, :3].T + b[:3, 3])).max())
    # Lipschitz: a 0.1 mm canonical displacement moves the posed point by a bounded multiple
    base = t.positions.astype(np.float64)
    delta = rng.normal(size=base.shape)
    delta *= 1e-4 / np.linalg.norm(delta, axis=1, keepdims=True)
    moved = pose_gaussians(t, field, tr, identity_offsets=delta)
    ratio = (np.linalg.norm(moved - pose_gaussians(t, field, tr), axis=1) / 1e-4).max()
    res = validate_transform(1000, 1)
    ok = rigid_err < 1e-12 and ratio < 50.0 and res["max_mpjpe"] <= 1e-6
    report("2", ok, f"substitute suites: rigid-limit error {rigid_err:.1e} m, skinning Lipschitz ratio "
                    f"{ratio:.1f}, transform max MPJPE {res['max_mpjpe']:.1e} m")
    assert ok


# --------------------------------------------------------------------------
# 3. compositing oracle


def test_criterion_3_compositing_oracle(report):
    rng = np.random.default_rng(3)
    worst = 0.0
    size, f = 32, 40.0
    cam = Camera(fx=f, fy=f, cx=(size - 1) / 2, cy=(size - 1) / 2, width=size, height=size)
    for _ in range(100):
        n = int(rng.integers(1, 51))
        z = rng.uniform(0.5, 1.5, n)
        px = rng.uniform(-2, size + 1, (n, 2))
        xy = (px - (size - 1) / 2) * z[:, None] / f
        g = GaussianSet(np.column_stack([xy, z]), rng.uniform(0, 1, (n, 3)), rng.uniform(0.05, 1.0, n),
                        rng.uniform(0.01, 0.06, n))
        out = render(g, cam, dtype=torch.float64)
        rgb, depth, alpha = composite_reference(cam, g.positions, g.colors, g.opacities, g.scales)
        fg = ~out.background
        worst = max(worst, np.abs(out.rgb - rgb).max(), np.abs(out.alpha - alpha).max(),
                    np.abs(out.depth[fg] - depth[fg]).max(initial=0.0))
    report("3", worst <= 1e-6, f"max deviation from brute-force compositor {worst:.1e} over 100 scenes")
    assert worst <= 1e-6


# --------------------------------------------------------------------------
# 4. end-to-end gradient check

E2E_CONFIG = AppearanceConfig(triplane_resolution=4, triplane_channels=2, angular_resolution=3,
                              angular_channels=2, encoding_levels=2, width=8, init_std=0.5)


def _central(f, p, d, step):
    with torch.no_grad():
        p.add_(step * d)
        fp = f().item()
        p.sub_(2 * step * d)
        fm = f().item()
        p.add_(step * d)
    return (fp - fm) / (2 * step)


def _richardson(f, p, d, h):
    """Central difference along d, Richardson-extrapolated from steps h and h/2."""
    return (4 * _central(f, p, d, h / 2) - _central(f, p, d, h)) / 3


def _fd_derivative(f, p, d, steps=(1e-4, 1e-5, 1e-6, 1e-7)):
    """Directional derivative with step selection: the estimate on which neighbouring steps agree best.

    Large steps can straddle a pixel footprint cutoff, tiny ones drown in round-off;
    the most self-consistent pair sits between the two regimes.
    """
    est = [_richardson(f, p, d, h) for h in steps]
    k = min(range(len(est) - 1), key=lambda i: abs(est[i] - est[i + 1]))
    return est[k + 1]


def _e2e_scene(assets, seed):
    rng = np.random.default_rng(seed)
    model = AppearanceModel(len(assets.template), E2E_CONFIG, seed=seed, init_scale=0.004).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # nonzero output layers so every parameter reaches the loss
        for name, p in model.named_parameters():
            if "decoder" in name:
                p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.3)
    avatar = HandAvatar(assets.template, assets.field, assets.canonical, model)
    skel = mild_pose(rng, assets.canonical, 0.3)
    cam = ring_camera(skel.joints.mean(0), int(rng.integers(8)), 8, 16, float(np.ptp(skel.joints, axis=0).max()))
    pose = avatar.pose_inputs(skel)
    gt = rng.random((16, 16, 3))
    mask = (rng.random((16, 16)) > 0.5).astype(float)
    shadow = ShadowSettings(params=ShadowParams(0.002, 0.004, 0.4), samples=16, radius=3.0, seed=seed)

    def total():
        out = avatar.render(pose, cam, shadow)
        g = out["gaussians"]
        return loss(out["rgb"], out["alpha"], gt, mask, (g["identity_offset"], g["nonrigid_offset"]),
                    g["scales"])[0]
    return model, total, rng


@pytest.mark.slow
def test_criterion_4_end_to_end_gradients(report):
    torch.set_num_threads(1)
    start = time.perf_counter()
    assets = build_assets(n_per_bone=10, seed=0, field_resolution=12)
    assert len(assets.template) <= 200
    worst, checks = 0.0, 0
    for seed in range(20):
        model, total, rng = _e2e_scene(assets, seed)
        params = dict(model.named_parameters())
        grads = torch.autograd.grad(total(), list(params.values()))
        for (name, p), g in zip(params.items(), grads):
            directions = []
            for _ in range(2):
                d = torch.from_numpy(rng.normal(size=p.shape))
                directions.append(d / d.norm())
            # plus the single entries carrying the largest gradient
            for flat in torch.topk(g.abs().flatten(), min(2, g.numel())).indices:
                d = torch.zeros(p.numel(), dtype=p.dtype)
                d[flat] = 1.0
                directions.append(d.reshape(p.shape))
            for d in directions:
                num = _fd_derivative(total, p, d)
                ana = float((g * d).sum())
                rel = abs(num - ana) / max(abs(num), abs(ana), 1e-300)
                worst = max(worst, rel)
                checks += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 300
    report("4", ok, f"worst relative error {worst:.1e} over {checks} checks on 20 scenes "
                    f"({len(assets.template)} Gaussians, 16x16, float64) in {elapsed:.0f} s")
    assert worst <= 1e-3
    assert elapsed < 300


# --------------------------------------------------------------------------
# 5. shadow layer


def test_criterion_5_shadow_layer(report):
    rng = np.random.default_rng(5)
    params = ShadowParams()
    # oracle equivalence
    oracle_err = 0.0
    for seed in range(5):
        depth = rng.uniform(0.44, 0.46, (24, 24))
        bg = rng.random((24, 24)) < 0.15
        k = build_kernel(4.0, 32, seed)
        oracle_err = max(oracle_err, np.abs(shadow_mask(depth, k, params, bg)
                                            - shadow_reference(depth, k.offsets, params.bias, params.softness,
                                                               bg)).max())
    # monotonicity
    kernel = build_kernel(3.0, 32, 1)
    violations = 0
    for _ in range(1000):
        depth = rng.uniform(0.44, 0.46, (9, 9))
        before = shadow_mask(depth, kernel, params)[4, 4]
        y, x = divmod(int(rng.choice([k for k in range(81) if k != 40])), 9)  # any neighbour of (4, 4)
        depth[y, x] -= rng.uniform(0.0, 0.02)
        violations += int(shadow_mask(depth, kernel, params)[4, 4] < before)
    # gradient
    depth = torch.tensor(rng.uniform(0.49, 0.51, (16, 16)), requires_grad=True)
    w = torch.from_numpy(rng.normal(size=(16, 16)))
    k16 = build_kernel(3.0, 16, 0)
    (g,) = torch.autograd.grad((shadow_mask(depth, k16, params) * w).sum(), depth)
    base = depth.detach()
    grad_err = 0.0
    for idx in [tuple(rng.integers(0, 16, 2)) for _ in range(40)]:
        d = torch.zeros_like(base)
        d[idx] = 1.0
        num = _richardson(lambda: (shadow_mask(base, k16, params) * w).sum(), base, d, 1e-6)
        grad_err = max(grad_err, abs(num - g[idx].item()) / max(abs(num), 1e-300))
    ok = oracle_err <= 1e-6 and violations == 0 and grad_err <= 1e-3
    report("5", ok, f"oracle deviation {oracle_err:.1e}, {violations} monotonicity violations in 1000, "
                    f"gradient relative error {grad_err:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 6. encoding exactness


def test_criterion_6_encoding_exactness(report):
    zero = positional_encode(np.zeros(3), 2)
    half = positional_encode(np.array([0.5, 0.0, 0.0]), 2)
    enc_err = max(np.abs(zero - np.array([0, 1, 0, 1] * 3)).max(), np.abs(half[:4] - [1, 0, 0, -1]).max())
    planes = torch.zeros(NUM_BONES, 3, 3, NUM_BONES, dtype=torch.float64)
    for b in range(NUM_BONES):
        planes[b, :, :, b] = 1.0
    norm, _ = normalize_angles(*np.zeros((2, NUM_BONES)), AngleLimits.default())
    feats = angular_features(torch.from_numpy(norm), planes).numpy()
    exact = True
    for b in range(NUM_BONES):
        expected = np.zeros(NUM_BONES)
        node, depth = b + 1, LEVELS[b + 1]
        while node:
            lvl = LEVELS[node]
            expected[node - 1] = 0.5 ** (depth - max(lvl, 2) + 1)
            node = PARENTS[node]
        exact &= bool(np.array_equal(feats[b], expected))
    ok = enc_err <= 1e-12 and exact
    report("6", ok, f"encoding max error {enc_err:.1e}; hierarchy coefficients exact: {exact}")
    assert ok


# --------------------------------------------------------------------------
# 7. overfit sanity


@pytest.mark.slow
def test_criterion_7_overfit(report, tmp_path):
    torch.set_num_threads(1)
    start = time.perf_counter()
    synthesize(tmp_path, n_views=8, image_size=128, seed=0)
    assets = load_assets(tmp_path)
    frames = load_dataset(tmp_path)
    model = AppearanceModel(len(assets.template), seed=0, init_scale=0.003)
    avatar = HandAvatar(assets.template, assets.field, assets.canonical, model)
    train(frames, avatar, TrainConfig(iterations=2000, seed=0))
    result = evaluate(avatar, frames)
    elapsed = time.perf_counter() - start
    ok = result.mean["psnr"] >= 28 and result.mean["ssim"] >= 0.90 and elapsed <= 1200
    report("7", ok, f"train-view PSNR {result.mean['psnr']:.2f} dB, SSIM {result.mean['ssim']:.4f} "
                    f"after 2000 iterations on 8 views at 128x128 in {elapsed / 60:.1f} min")
    assert result.mean["psnr"] >= 28
    assert result.mean["ssim"] >= 0.90
    assert elapsed <= 1200


# --------------------------------------------------------------------------
# 8. performance envelope


def test_criterion_8a_render_time(report):
    res = run_isolated(60_000, 256, 1)
    ok = res["median_s"] <= 0.250
    report("8a", ok, f"60k Gaussians at 256x256, 1 thread: median {res['median_s'] * 1e3:.0f} ms")
    assert ok


def test_criterion_8b_thread_speedup(report):
    one = run_isolated(60_000, 256, 1)
    four = run_isolated(60_000, 256, 4)
    speedup = one["median_s"] / four["median_s"]
    ok = speedup >= 2.0
    report("8b", ok, f"speedup at 4 threads {speedup:.2f}x ({one['median_s'] * 1e3:.0f} ms -> "
                     f"{four['median_s'] * 1e3:.0f} ms) on a machine with {os.cpu_count()} CPU(s)")
    assert speedup >= 2.0


# --------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(report, tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--views", "2", "--size", "48", "--n-per-bone", "40",
                 "--field-resolution", "20", "--threads", "1"]) == 0
    for run in ("a", "b"):
        assert main(["train", "--dataset", str(data), "--iterations", "10", "--threads", "1", "--seed", "7",
                     "--out", str(tmp_path / f"train_{run}")]) == 0
        assert main(["render", str(data / "template.jgtp"), str(data / "skeletons" / "000001.json"),
                     str(data / "cameras" / "000001.json"), "--checkpoint",
                     str(tmp_path / f"train_{run}" / "checkpoint.jgck"), "--threads", "1",
                     "--out", str(tmp_path / f"render_{run}")]) == 0
    files = ["train_{}/checkpoint.jgck", "train_{}/train_log.csv", "render_{}/rgb.png", "render_{}/depth.pfm",
             "render_{}/alpha.png", "render_{}/shadow.png"]
    same = all((tmp_path / f.format("a")).read_bytes() == (tmp_path / f.format("b")).read_bytes() for f in files)
    report("9", same, f"{len(files)} train/render outputs bit-identical across two runs")
    assert same
