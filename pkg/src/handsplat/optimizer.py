"""Losses, image/skeleton/mesh metrics, training and evaluation."""
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .appearance import save_checkpoint
from .avatar import HandAvatar, ShadowSettings
from .imageio import read_png, write_png
from .kinematics import DegenerateSkeletonError, HandSkeleton, load_skeleton, mpjpe, save_skeleton
from .renderer import Camera, load_camera, save_camera

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
OFFSET_NORM_EPS = 1e-24


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    ssim: float = 0.2
    lpips: float = 0.2
    mask: float = 0.2
    reg: float = 1.0
    iso: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    seed: int = 0
    image_size: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shadow: bool = True
    shadow_gradients: bool = True
    isotropic: bool = True
    iterations: Optional[int] = None  # stop after this many steps if set
    float64: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class FrameRecord:
    image: np.ndarray  # H×W×3 in [0, 1]
    mask: np.ndarray  # H×W, 1 on the hand
    skeleton: HandSkeleton
    camera: Camera
    frame_id: int = 0
    split: str = "train"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = (np.asarray(self.mask) > 0.5).astype(np.float32)
        shape = (self.camera.height, self.camera.width)
        if self.image.shape != shape + (3,) or self.mask.shape != shape:
            raise ValueError(f"frame {self.frame_id}: image/mask size does not match camera {shape}")


# --------------------------------------------------------------------------
# image similarity


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(pred, gt, size: int = 11, sigma: float = 1.5):
    """Mean SSIM of H×W×C images in [0, 1] over the valid (unpadded) region."""
    as_numpy = not isinstance(pred, torch.Tensor)
    x = torch.as_tensor(np.asarray(pred, dtype=np.float64)) if as_numpy else pred
    y = torch.as_tensor(np.asarray(gt, dtype=np.float64), dtype=x.dtype) if not isinstance(gt, torch.Tensor) \
        else gt.to(x.dtype)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 2:
        x, y = x[..., None], y[..., None]
    c = x.shape[-1]
    w = gaussian_window(size, sigma, x.dtype).expand(c, 1, size, size)
    x = x.permute(2, 0, 1)[None]
    y = y.permute(2, 0, 1)[None]

    def filt(img):
        return F.conv2d(img, w, groups=c)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cov = filt(x * y) - mx * my
    s = ((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)) / ((mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2))
    out = s.mean()
    return float(out) if as_numpy else out


def psnr(pred, gt) -> float:
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def metrics(pred, gt) -> dict:
    return {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}


def skeleton_metrics(a, b) -> dict:
    return {"mpjpe": float(mpjpe(a, b))}


def chamfer_l1(a, b) -> float:
    """Mean of the two directed mean nearest-neighbor distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    dab = cKDTree(b).query(a)[0]
    dba = cKDTree(a).query(b)[0]
    return 0.5 * (dab.mean() + dba.mean())


def mesh_metrics(a, b) -> dict:
    return {"chamfer_l1": chamfer_l1(a, b)}


# --------------------------------------------------------------------------
# training loss


def offset_regularizer(*offsets: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean norm over every offset vector (smoothed at zero)."""
    rows = torch.cat([o.reshape(-1, 3) for o in offsets])
    return (torch.sqrt((rows ** 2).sum(-1) + OFFSET_NORM_EPS) - math.sqrt(OFFSET_NORM_EPS)).mean()


def iso_regularizer(scales: torch.Tensor) -> torch.Tensor:
    """Mean deviation of the scale-axis ratio from 1; zero for isotropic scales."""
    if scales.dim() == 1:
        return scales.sum() * 0.0
    return (scales.max(-1).values / scales.min(-1).values - 1.0).mean()


TERMS = ("rgb", "ssim", "lpips", "mask", "reg", "iso")


def loss(pred_rgb: torch.Tensor, pred_alpha: torch.Tensor, gt_image, gt_mask, offsets: Sequence[torch.Tensor],
         scales: torch.Tensor, weights: LossWeights = LossWeights(),
         perceptual: Optional[Callable] = None):
    """Weighted training loss; returns (total, {term: unweighted value})."""
    dtype = pred_rgb.dtype
    gt = torch.as_tensor(np.asarray(gt_image), dtype=dtype)
    mask = torch.as_tensor(np.asarray(gt_mask), dtype=dtype)
    if pred_rgb.shape != gt.shape or pred_alpha.shape != mask.shape:
        raise ValueError(f"shape mismatch: rgb {tuple(pred_rgb.shape)} vs {tuple(gt.shape)}, "
                         f"alpha {tuple(pred_alpha.shape)} vs {tuple(mask.shape)}")
    terms = {
        "rgb": (pred_rgb - gt).abs().mean(),
        "ssim": 1.0 - ssim(pred_rgb, gt),
        "lpips": perceptual(pred_rgb, gt) if perceptual is not None else pred_rgb.sum() * 0.0,
        "mask": ((pred_alpha - mask) ** 2).mean(),
        "reg": offset_regularizer(*offsets),
        "iso": iso_regularizer(scales),
    }
    total = sum(getattr(weights, k) * terms[k] for k in TERMS)
    return total, terms


# --------------------------------------------------------------------------
# dataset manifest


def save_dataset(frames: Sequence[FrameRecord], root) -> None:
    root = Path(root)
    for sub in ("frames", "masks", "skeletons", "cameras"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for fr in frames:
        name = f"{fr.frame_id:06d}"
        write_png(root / "frames" / f"{name}.png", fr.image)
        write_png(root / "masks" / f"{name}.png", fr.mask)
        save_skeleton(fr.skeleton, root / "skeletons" / f"{name}.json")
        save_camera(fr.camera, root / "cameras" / f"{name}.json")
        entries.append({"id": fr.frame_id, "split": fr.split})
    (root / "manifest.json").write_text(json.dumps({"version": 1, "frames": entries}, indent=2))


def load_dataset(root, split: Optional[str] = None) -> list:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    frames = []
    for entry in manifest["frames"]:
        if split is not None and entry["split"] != split:
            continue
        name = f"{int(entry['id']):06d}"
        frames.append(FrameRecord(
            image=read_png(root / "frames" / f"{name}.png"),
            mask=read_png(root / "masks" / f"{name}.png", gray=True),
            skeleton=load_skeleton(root / "skeletons" / f"{name}.json"),
            camera=load_camera(root / "cameras" / f"{name}.json"),
            frame_id=int(entry["id"]), split=entry["split"]))
    return frames


# --------------------------------------------------------------------------
# training / evaluation


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    steps: int = 0


def _prepare(avatar: HandAvatar, dataset):
    ready, skipped = [], []
    for fr in dataset:
        try:
            ready.append((fr, avatar.pose_inputs(fr.skeleton)))
        except DegenerateSkeletonError as exc:
            log.warning("skipping frame %d: %s", fr.frame_id, exc)
            skipped.append(fr.frame_id)
    return ready, skipped


def train(dataset: Sequence[FrameRecord], avatar: HandAvatar, config: TrainConfig = TrainConfig(),
          weights: LossWeights = LossWeights(), shadow: Optional[ShadowSettings] = None,
          log_path=None, checkpoint_path=None, perceptual: Optional[Callable] = None) -> TrainResult:
    """Fit the avatar's appearance model in place; canonical geometry and weights stay fixed."""
    if len(dataset) == 0:
        raise EmptyDatasetError("training needs at least one frame")
    if shadow is None:
        shadow = ShadowSettings(enabled=config.shadow, gradients=config.shadow_gradients)
    model = avatar.model
    if config.float64:
        model.double()
    ready, skipped = _prepare(avatar, dataset)
    if not ready:
        raise EmptyDatasetError("every frame in the dataset was degenerate")
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(skipped=skipped)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "frame", "total", *TERMS, "psnr"])
    try:
        total_steps = config.iterations if config.iterations is not None else config.epochs * len(ready)
        epoch = 0
        while result.steps < total_steps:
            epoch_psnr = []
            for k in rng.permutation(len(ready)):
                if result.steps >= total_steps:
                    break
                fr, pose = ready[k]
                out = avatar.render(pose, fr.camera, shadow)
                g = out["gaussians"]
                total, terms = loss(out["rgb"], out["alpha"], fr.image, fr.mask,
                                    (g["identity_offset"], g["nonrigid_offset"]), g["scales"], weights, perceptual)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                result.steps += 1
                p = psnr(out["rgb"].detach().numpy(), fr.image)
                epoch_psnr.append(p)
                row = {"step": result.steps, "epoch": epoch, "frame": fr.frame_id, "total": float(total.detach()),
                       **{t: float(terms[t].detach()) for t in TERMS}, "psnr": p}
                result.history.append(row)
                if writer is not None:
                    writer.writerow([row[c] for c in ["step", "epoch", "frame", "total", *TERMS, "psnr"]])
            log.info("epoch %d: mean train PSNR %.3f", epoch, float(np.mean(epoch_psnr)))
            epoch += 1
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, {"steps": result.steps, "seed": config.seed})
    return result


@dataclass
class EvalResult:
    rows: list
    mean: dict

    def table(self) -> str:
        lines = ["frame,psnr,ssim"] + [f"{r['frame']},{r['psnr']:.6f},{r['ssim']:.6f}" for r in self.rows]
        lines.append(f"mean,{self.mean['psnr']:.6f},{self.mean['ssim']:.6f}")
        return "\n".join(lines)


def evaluate(avatar: HandAvatar, dataset: Sequence[FrameRecord], out_dir=None,
             shadow: ShadowSettings = ShadowSettings()) -> EvalResult:
    if len(dataset) == 0:
        raise EmptyDatasetError("evaluation dataset is empty")
    rows = []
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for fr in dataset:
            pose = avatar.pose_inputs(fr.skeleton)
            out = avatar.render(pose, fr.camera, shadow)
            rgb = out["rgb"].numpy()
            if rgb.shape != fr.image.shape:
                raise ValueError(f"frame {fr.frame_id}: rendered {rgb.shape}, image {fr.image.shape}")
            m = metrics(rgb, fr.image)
            rows.append({"frame": fr.frame_id, **m})
            if out_dir is not None:
                write_png(Path(out_dir) / f"{fr.frame_id:06d}.png", rgb)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim")}
    result = EvalResult(rows, mean)
    if out_dir is not None:
        (Path(out_dir) / "metrics.csv").write_text(result.table() + "\n")
    return result
