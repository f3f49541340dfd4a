"""Command-line entry point: ``handsplat <subcommand> ...``.

Exit codes: 0 success, 1 validation failure, 2 usage or I/O error.
Every subcommand accepts ``--config run.json``; keys mirror the long flag
names (dashes become underscores) and explicit flags override them.
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MPJPE_TOLERANCE = 1e-6


class UsageError(Exception):
    pass


# options shared by every subcommand: (flag, type, default, help)
COMMON = [
    ("--seed", int, 0, "random seed"),
    ("--threads", int, None, "worker threads (default: all; 1 gives bit-identical runs)"),
]

COMMANDS = {
    "pose": [
        ("--out", str, None, "output skeleton JSON"),
    ],
    "render": [
        ("--checkpoint", str, None, "appearance checkpoint (default: untrained appearance)"),
        ("--field", str, None, "weight-field file (default: weights.jgwf next to the template)"),
        ("--canonical", str, None, "canonical skeleton (default: canonical.json next to the template)"),
        ("--out", str, "render_out", "output directory"),
        ("--shadow", str, "on", "on|off"),
        ("--shadow-samples", int, 64, "shadow kernel sample count"),
        ("--shadow-radius", float, None, "shadow kernel radius in pixels"),
        ("--shadow-bias", float, 0.005, "occlusion bias in meters"),
        ("--shadow-softness", float, 0.002, "occlusion softness in meters"),
        ("--shadow-strength", float, 0.4, "darkening strength in [0, 1]"),
    ],
    "synth": [
        ("--out", str, "synth_data", "output dataset directory"),
        ("--views", int, 8, "number of frames"),
        ("--size", int, 128, "image width and height"),
        ("--n-per-bone", int, 200, "template Gaussians per bone"),
        ("--field-resolution", int, 48, "weight-field grid nodes per axis"),
    ],
    "validate-transform": [
        ("--trials", int, 1000, "number of random targets"),
    ],
    "train": [
        ("--dataset", str, None, "dataset directory (manifest.json)"),
        ("--assets", str, None, "directory with template/weights/canonical (default: the dataset)"),
        ("--out", str, "train_out", "output directory for checkpoint and logs"),
        ("--epochs", int, 30, "training epochs"),
        ("--iterations", int, None, "stop after this many steps"),
        ("--lr", float, 1e-3, "learning rate"),
        ("--shadow", str, "on", "on|off"),
        ("--shadow-gradients", str, "on", "on|off"),
        ("--init-scale", float, 0.003, "initial Gaussian scale in meters"),
        ("--float64", str, "off", "on|off"),
        ("--split", str, "train", "manifest split to train on"),
    ],
    "eval": [
        ("--dataset", str, None, "dataset directory"),
        ("--assets", str, None, "asset directory (default: the dataset)"),
        ("--checkpoint", str, None, "trained checkpoint"),
        ("--out", str, "eval_out", "output directory"),
        ("--shadow", str, "on", "on|off"),
        ("--split", str, None, "manifest split (default: all frames)"),
    ],
    "shadow-debug": [
        ("--alpha", str, None, "alpha PNG marking the foreground (default: max-depth pixels are background)"),
        ("--out", str, "shadow.png", "output mask PNG"),
        ("--samples", int, 64, "kernel sample count"),
        ("--radius", float, None, "kernel radius in pixels (default: 3% of height)"),
        ("--bias", float, 0.005, "occlusion bias in meters"),
        ("--softness", float, 0.002, "occlusion softness in meters"),
        ("--strength", float, 0.4, "darkening strength"),
    ],
}

POSITIONALS = {
    "pose": [("canonical", "canonical skeleton JSON"), ("target", "target skeleton JSON")],
    "render": [("template", "template file"), ("skeleton", "target skeleton JSON"), ("camera", "camera JSON")],
    "shadow-debug": [("depth", "depth PFM")],
}

ISO_COMMANDS = ("train", "render")
PATH_KEYS = {"dataset", "assets", "checkpoint", "field", "canonical", "alpha"}


@dataclass
class RunConfig:
    """Merged settings: command defaults < config file < explicit flags."""
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def load(cls, command: str, args: argparse.Namespace) -> "RunConfig":
        specs = COMMON + COMMANDS[command]
        values = {_key(flag): default for flag, _, default, _ in specs}
        if command in ISO_COMMANDS:
            values["iso"] = True
        if args.config is not None:
            data = json.loads(Path(args.config).read_text())
            unknown = set(data) - set(values)
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            for k in data:
                if k in PATH_KEYS and data[k] is not None and not Path(data[k]).exists():
                    raise FileNotFoundError(f"config path {k}={data[k]} does not exist")
            values.update(data)
        for k in values:
            explicit = getattr(args, k, None)
            if explicit is not None:
                values[k] = explicit
        for name, _ in POSITIONALS.get(command, []):
            values[name] = getattr(args, name)
        return cls(values)


def _key(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def _on(value) -> bool:
    if isinstance(value, bool):
        return value
    if value not in ("on", "off"):
        raise UsageError(f"expected on|off, got {value!r}")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="handsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, specs in COMMANDS.items():
        p = sub.add_parser(name)
        for pos, help_ in POSITIONALS.get(name, []):
            p.add_argument(pos, help=help_)
        p.add_argument("--config", default=None, help="JSON file of option values")
        for flag, typ, default, help_ in COMMON + specs:
            if "(default" not in help_:
                help_ = f"{help_} (default: {default})"
            p.add_argument(flag, type=typ, default=None, help=help_.replace("%", "%%"))
        if name in ISO_COMMANDS:
            g = p.add_mutually_exclusive_group()
            g.add_argument("--iso", dest="iso", action="store_const", const=True, default=None,
                           help="isotropic Gaussians (default)")
            g.add_argument("--aniso", dest="iso", action="store_const", const=False,
                           help="anisotropic Gaussians")
    return parser


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# --------------------------------------------------------------------------
# subcommands


def cmd_pose(cfg: RunConfig) -> int:
    from .kinematics import apply_transform, compute_transform, load_skeleton, mpjpe, save_skeleton
    canonical = load_skeleton(_require(cfg.canonical, "canonical skeleton"))
    target = load_skeleton(_require(cfg.target, "target skeleton"))
    posed = apply_transform(compute_transform(canonical, target), canonical)
    err = float(mpjpe(posed, target))
    if cfg.out is not None:
        save_skeleton(posed, cfg.out)
    print(f"MPJPE {err:.3e} m")
    return EXIT_OK if err <= MPJPE_TOLERANCE else EXIT_FAIL


def _shadow_settings(cfg: RunConfig, prefix: str = "shadow_"):
    from .avatar import ShadowSettings
    from .shadow import ShadowParams
    params = ShadowParams(cfg.values[prefix + "bias"], cfg.values[prefix + "softness"],
                          cfg.values[prefix + "strength"])
    return ShadowSettings(enabled=_on(cfg.shadow), params=params, samples=cfg.shadow_samples,
                          radius=cfg.shadow_radius, seed=cfg.seed)


def _avatar(template_path: Path, field_path, canonical_path, checkpoint, iso: bool, seed: int):
    from .appearance import AppearanceModel, load_checkpoint
    from .avatar import HandAvatar
    from .kinematics import canonical_skeleton, load_skeleton
    from .template import load_template, load_weight_field
    template = load_template(template_path)
    field = load_weight_field(_require(field_path or template_path.with_name("weights.jgwf"), "weight field"))
    default_canon = template_path.with_name("canonical.json")
    if canonical_path is not None:
        canonical = load_skeleton(_require(canonical_path, "canonical skeleton"))
    elif default_canon.exists():
        canonical = load_skeleton(default_canon)
    else:
        canonical = canonical_skeleton()
    if checkpoint is not None:
        model = load_checkpoint(_require(checkpoint, "checkpoint"), len(template))
    else:
        model = AppearanceModel(len(template), isotropic=iso, seed=seed, init_scale=0.003)
    return HandAvatar(template, field, canonical, model)


def cmd_render(cfg: RunConfig) -> int:
    import torch
    from .imageio import write_pfm, write_png
    from .kinematics import load_skeleton
    from .renderer import load_camera
    avatar = _avatar(_require(cfg.template, "template"), cfg.field, cfg.canonical, cfg.checkpoint, cfg.iso, cfg.seed)
    skeleton = load_skeleton(_require(cfg.skeleton, "skeleton"))
    camera = load_camera(_require(cfg.camera, "camera"))
    shadow = _shadow_settings(cfg)
    with torch.no_grad():
        out = avatar.render(avatar.pose_inputs(skeleton), camera, shadow)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_png(out_dir / "rgb.png", out["rgb"].numpy())
    write_pfm(out_dir / "depth.pfm", out["depth"].numpy())
    write_png(out_dir / "alpha.png", out["alpha"].numpy())
    if shadow.enabled:
        write_png(out_dir / "shadow.png", out["shadow"].numpy())
    coverage = float((out["alpha"] > 0.5).float().mean())
    print(f"wrote {out_dir}; alpha coverage {coverage:.1%}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    from .synth import synthesize
    if cfg.views < 1 or cfg.size < 16:
        raise UsageError("synth needs --views >= 1 and --size >= 16")
    synthesize(cfg.out, cfg.views, cfg.size, cfg.seed, cfg.n_per_bone, cfg.field_resolution)
    print(f"wrote {cfg.views} frames to {cfg.out}")
    return EXIT_OK


def validate_transform(n_trials: int, seed: int) -> dict:
    """Random in-limit targets with +-30% bone lengths; returns a report dict."""
    from .kinematics import apply_transform, canonical_skeleton, compute_transform, mpjpe, sample_pose
    rng = np.random.default_rng(seed)
    canonical = canonical_skeleton()
    targets = np.stack([sample_pose(rng, canonical).joints for _ in range(n_trials)])
    start = time.perf_counter()
    posed = apply_transform(compute_transform(canonical, targets), canonical)
    elapsed = time.perf_counter() - start
    errors = mpjpe(posed, targets)
    return {"trials": n_trials, "seed": seed, "max_mpjpe": float(errors.max()),
            "mean_mpjpe": float(errors.mean()), "seconds": elapsed}


def cmd_validate_transform(cfg: RunConfig) -> int:
    if cfg.trials < 1:
        raise UsageError("--trials must be >= 1")
    report = validate_transform(cfg.trials, cfg.seed)
    print(f"trials {report['trials']} seed {report['seed']}")
    print(f"max MPJPE {report['max_mpjpe']:.3e} m, mean {report['mean_mpjpe']:.3e} m")
    ok = report["max_mpjpe"] <= MPJPE_TOLERANCE
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(cfg: RunConfig) -> int:
    from .optimizer import TrainConfig, load_dataset, train
    dataset_dir = _require(cfg.dataset, "--dataset")
    assets = Path(cfg.assets) if cfg.assets else dataset_dir
    frames = load_dataset(dataset_dir, cfg.split)
    avatar = _avatar(_require(assets / "template.jgtp", "template"), assets / "weights.jgwf",
                     assets / "canonical.json", None, cfg.iso, cfg.seed)
    avatar.model.log_scales.data.fill_(float(np.log(cfg.init_scale)))
    tc = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed, shadow=_on(cfg.shadow),
                     shadow_gradients=_on(cfg.shadow_gradients), isotropic=cfg.iso,
                     iterations=cfg.iterations, float64=_on(cfg.float64))
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(frames, avatar, tc, log_path=out_dir / "train_log.csv",
                   checkpoint_path=out_dir / "checkpoint.jgck")
    last = result.history[-1]
    print(f"{result.steps} steps, final loss {last['total']:.5f}, PSNR {last['psnr']:.2f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    from .avatar import ShadowSettings
    from .optimizer import evaluate, load_dataset
    dataset_dir = _require(cfg.dataset, "--dataset")
    assets = Path(cfg.assets) if cfg.assets else dataset_dir
    frames = load_dataset(dataset_dir, cfg.split)
    avatar = _avatar(_require(assets / "template.jgtp", "template"), assets / "weights.jgwf",
                     assets / "canonical.json", _require(cfg.checkpoint, "--checkpoint"), True, cfg.seed)
    result = evaluate(avatar, frames, cfg.out, ShadowSettings(enabled=_on(cfg.shadow), seed=cfg.seed))
    print(result.table())
    return EXIT_OK


def cmd_shadow_debug(cfg: RunConfig) -> int:
    from .imageio import read_pfm, read_png, write_png
    from .shadow import ShadowParams, build_kernel, default_kernel, shadow_mask
    depth = read_pfm(_require(cfg.depth, "depth")).astype(np.float64)
    if depth.ndim != 2:
        raise UsageError("depth PFM must be single-channel")
    if cfg.alpha is not None:
        background = read_png(_require(cfg.alpha, "alpha"), gray=True) < 0.5 / 255
    else:
        background = depth >= depth.max()
    if cfg.radius is None:
        kernel = default_kernel(depth.shape[0], cfg.samples, cfg.seed)
    else:
        kernel = build_kernel(cfg.radius, cfg.samples, cfg.seed)
    mask = shadow_mask(depth, kernel, ShadowParams(cfg.bias, cfg.softness, cfg.strength), background)
    write_png(cfg.out, mask)
    print(f"wrote {cfg.out}; mean shadow {mask.mean():.4f}")
    return EXIT_OK


HANDLERS = {
    "pose": cmd_pose, "render": cmd_render, "synth": cmd_synth, "validate-transform": cmd_validate_transform,
    "train": cmd_train, "eval": cmd_eval, "shadow-debug": cmd_shadow_debug,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.command, args)
        from .renderer import set_threads
        set_threads(cfg.threads)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
