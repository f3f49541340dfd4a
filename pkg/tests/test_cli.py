import json

import numpy as np
import pytest
import torch

from handsplat.appearance import AppearanceModel, save_checkpoint
from handsplat.avatar import ShadowSettings
from handsplat.cli import _avatar, main, validate_transform
from handsplat.imageio import read_pfm, read_png, to_uint8, write_pfm
from handsplat.kinematics import canonical_skeleton, load_skeleton, sample_pose, save_skeleton
from handsplat.optimizer import load_dataset
from handsplat.renderer import Camera, load_camera, save_camera
from handsplat.shadow import composite
from handsplat.synth import load_assets, render_ground_truth

SYNTH = ["--views", "2", "--size", "32", "--n-per-bone", "20", "--field-resolution", "16", "--threads", "1"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "--seed", "3", *SYNTH]) == 0
    return root


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    canon = canonical_skeleton()
    save_skeleton(canon, root / "canon.json")
    center = canon.joints.mean(0)
    extent = np.ptp(canon.joints, axis=0).max()
    cam = Camera.look_at(center + np.array([0, 0, -0.45]), center, [0, 1, 0], 64 * 0.45 / (1.15 * extent), 64, 64)
    save_camera(cam, root / "cam.json")
    return root


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["pose", "missing.json", "other.json"]) == 2
    assert main(["validate-transform", "--trials", "0"]) == 2


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    for name in ("pose", "render", "synth", "validate-transform", "train", "eval", "shadow-debug"):
        assert main([name, "--help"]) == 0
    assert "3% of height" in capsys.readouterr().out


def test_pose_identity(tmp_path, scene, capsys):
    out = tmp_path / "posed.json"
    assert main(["pose", str(scene / "canon.json"), str(scene / "canon.json"), "--out", str(out)]) == 0
    err = float(capsys.readouterr().out.split()[1])
    assert err <= 1e-6 and out.exists()


def test_pose_random_target(tmp_path, scene, capsys):
    target = sample_pose(np.random.default_rng(0), canonical_skeleton())
    save_skeleton(target, tmp_path / "t.json")
    assert main(["pose", str(scene / "canon.json"), str(tmp_path / "t.json")]) == 0
    assert float(capsys.readouterr().out.split()[1]) <= 1e-6


def test_pose_malformed_json(tmp_path, scene, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["pose", str(scene / "canon.json"), str(tmp_path / "bad.json")]) != 0
    assert "error" in capsys.readouterr().err


def test_validate_transform_report():
    a, b = validate_transform(50, 7), validate_transform(50, 7)
    assert a["max_mpjpe"] <= 1e-6
    assert {k: v for k, v in a.items() if k != "seconds"} == {k: v for k, v in b.items() if k != "seconds"}


def test_validate_transform_cli(capsys):
    assert main(["validate-transform", "--trials", "100", "--seed", "1"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_synth_layout(data):
    manifest = json.loads((data / "manifest.json").read_text())
    assert [f["id"] for f in manifest["frames"]] == [0, 1]
    for sub, ext in (("frames", "png"), ("masks", "png"), ("skeletons", "json"), ("cameras", "json")):
        assert sorted(p.name for p in (data / sub).iterdir()) == [f"000000.{ext}", f"000001.{ext}"]
    for name in ("mesh.obj", "canonical.json", "template.jgtp", "weights.jgwf"):
        assert (data / name).exists()


def test_synth_masks_are_thresholded_alpha(data):
    assets = load_assets(data)
    for fr in load_dataset(data):
        _, alpha = render_ground_truth(assets, fr.skeleton, fr.camera)
        assert np.array_equal(fr.mask > 0.5, alpha > 0.5)


def test_synth_is_deterministic(tmp_path, data):
    assert main(["synth", "--out", str(tmp_path), "--seed", "3", *SYNTH]) == 0
    for p in data.rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / p.relative_to(data)).read_bytes(), p


def _render(data, scene, out, *extra):
    return main(["render", str(data / "template.jgtp"), str(scene / "canon.json"), str(scene / "cam.json"),
                 "--out", str(out), "--threads", "1", *extra])


def test_render_outputs_and_coverage(tmp_path, data, scene):
    assert _render(data, scene, tmp_path) == 0
    for name in ("rgb.png", "depth.pfm", "alpha.png", "shadow.png"):
        assert (tmp_path / name).exists()
    alpha = read_png(tmp_path / "alpha.png", gray=True)
    assert (alpha > 0.5).mean() > 0.05
    assert read_pfm(tmp_path / "depth.pfm").shape == (64, 64)


def test_render_shadow_off_is_identity_composite(tmp_path, data, scene):
    assert _render(data, scene, tmp_path / "off", "--shadow", "off") == 0
    assert not (tmp_path / "off" / "shadow.png").exists()
    # raw colors come from the same pipeline with shadows disabled; S = 0 must leave them unchanged
    av = _avatar(data / "template.jgtp", None, None, None, True, 0)
    with torch.no_grad():
        out = av.render(av.pose_inputs(load_skeleton(scene / "canon.json")), load_camera(scene / "cam.json"),
                        ShadowSettings(enabled=False))
    raw = out["raw_rgb"].numpy()
    expected = to_uint8(composite(raw, np.zeros(raw.shape[:2]), 0.4))
    assert np.array_equal(to_uint8(read_png(tmp_path / "off" / "rgb.png")), expected)


def test_render_is_deterministic(tmp_path, data, scene):
    assert _render(data, scene, tmp_path / "a") == 0
    assert _render(data, scene, tmp_path / "b") == 0
    for name in ("rgb.png", "depth.pfm", "alpha.png", "shadow.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_render_rejects_incompatible_checkpoint(tmp_path, data, scene, capsys):
    save_checkpoint(AppearanceModel(7), tmp_path / "wrong.jgck")
    assert _render(data, scene, tmp_path / "o", "--checkpoint", str(tmp_path / "wrong.jgck")) == 1
    assert "7 Gaussians" in capsys.readouterr().err
    raw = bytearray((tmp_path / "wrong.jgck").read_bytes())
    raw[4:8] = (2).to_bytes(4, "little")
    (tmp_path / "v2.jgck").write_bytes(bytes(raw))
    assert _render(data, scene, tmp_path / "o", "--checkpoint", str(tmp_path / "v2.jgck")) == 1
    assert "version 2" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"trials": 20, "seed": 4}))
    assert main(["validate-transform", "--config", str(cfg)]) == 0
    assert "trials 20 seed 4" in capsys.readouterr().out
    assert main(["validate-transform", "--config", str(cfg), "--trials", "30"]) == 0
    assert "trials 30 seed 4" in capsys.readouterr().out


def test_config_rejects_unknown_keys_and_missing_paths(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"trails": 20}))
    assert main(["validate-transform", "--config", str(cfg)]) == 2
    assert "trails" in capsys.readouterr().err
    cfg.write_text(json.dumps({"dataset": str(tmp_path / "nowhere")}))
    assert main(["train", "--config", str(cfg)]) == 2


def test_train_and_eval(tmp_path, data, capsys):
    run = ["train", "--dataset", str(data), "--iterations", "3", "--threads", "1", "--seed", "2"]
    assert main(run + ["--out", str(tmp_path / "a")]) == 0
    assert main(run + ["--out", str(tmp_path / "b")]) == 0
    ck = tmp_path / "a" / "checkpoint.jgck"
    assert ck.read_bytes() == (tmp_path / "b" / "checkpoint.jgck").read_bytes()
    assert len((tmp_path / "a" / "train_log.csv").read_text().splitlines()) == 4
    assert main(["eval", "--dataset", str(data), "--checkpoint", str(ck), "--out", str(tmp_path / "e")]) == 0
    table = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    assert table[0] == "frame,psnr,ssim" and table[-1].startswith("mean,")


def test_train_aniso(tmp_path, data):
    assert main(["train", "--dataset", str(data), "--iterations", "1", "--aniso", "--out", str(tmp_path)]) == 0


def test_shadow_debug(tmp_path, capsys):
    depth = np.full((20, 20), 0.5, dtype=np.float32)
    depth[:, :10] = 0.4
    depth[:2] = 1.0  # far rows act as background
    write_pfm(tmp_path / "d.pfm", depth)
    assert main(["shadow-debug", str(tmp_path / "d.pfm"), "--out", str(tmp_path / "s.png"), "--radius", "3"]) == 0
    s = read_png(tmp_path / "s.png", gray=True)
    assert s.shape == (20, 20)
    assert np.all(s[:2] == 0)
    assert s[10, 10] > s[10, 18]
