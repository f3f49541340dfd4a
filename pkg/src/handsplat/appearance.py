"""Per-Gaussian appearance and offsets decoded from feature planes.

An identity triplane over uvd yields a canonical offset, color and opacity
for every Gaussian. Per-bone angular planes, looked up at the normalized
pose angles and averaged down the kinematic tree, condition a second decoder
that predicts pose-dependent offsets.
"""
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .kinematics import NUM_BONES, PARENTS, AngleLimits

MAX_OFFSET = 0.005
CHECKPOINT_MAGIC = b"JGCK"
CHECKPOINT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


def positional_encode(uvd, levels: int = 6):
    """sin/cos of 2^k·pi·x for k < levels, per coordinate (u block, v block, d block)."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    x = uvd if isinstance(uvd, torch.Tensor) else torch.as_tensor(np.asarray(uvd, dtype=np.float64))
    freqs = (2.0 ** torch.arange(levels, dtype=x.dtype)) * torch.pi
    ang = x[..., :, None] * freqs  # (..., 3, L)
    enc = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., 3, L, 2)
    enc = enc.reshape(x.shape[:-1] + (x.shape[-1] * 2 * levels,))
    return enc if isinstance(uvd, torch.Tensor) else enc.numpy()


class ClampCounter:
    """Counts angle values that fell outside their limits."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


def normalize_angles(flexion, abduction, limits: AngleLimits, counter: ClampCounter = None):
    """Map per-bone angles to [0, 1]² ordered (abduction, flexion).

    Returns (normalized (..., 20, 2), clamped (..., 20, 2) bool).
    """
    f = np.asarray(flexion, dtype=np.float64)
    a = np.asarray(abduction, dtype=np.float64)
    tab = limits.table
    nf = (f - tab[:, 0]) / (tab[:, 1] - tab[:, 0])
    na = (a - tab[:, 2]) / (tab[:, 3] - tab[:, 2])
    raw = np.stack([na, nf], axis=-1)
    clamped = (raw < 0.0) | (raw > 1.0)
    if counter is not None:
        counter.count += int(clamped.sum())
    return np.clip(raw, 0.0, 1.0), clamped


def bilinear(grid: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``grid`` (R0, R1, C) at coords (..., 2) in [0, 1]²; nodes sit at k/(R-1)."""
    r = torch.tensor(grid.shape[:2], dtype=coords.dtype)
    t = torch.clamp(coords, 0.0, 1.0) * (r - 1)
    i0 = torch.minimum(torch.floor(t.detach()), r - 2).long()
    i0 = torch.clamp(i0, min=0)
    fr = t - i0.to(coords.dtype)
    i, j = i0[..., 0], i0[..., 1]
    fu, fv = fr[..., 0:1], fr[..., 1:2]
    return ((1 - fu) * (1 - fv) * grid[i, j] + fu * (1 - fv) * grid[i + 1, j]
            + (1 - fu) * fv * grid[i, j + 1] + fu * fv * grid[i + 1, j + 1])


PLANE_AXES = ((0, 1), (1, 2), (0, 2))


def triplane_features(planes: torch.Tensor, uvd: torch.Tensor) -> torch.Tensor:
    """Concatenate lookups in the (u,v), (v,d), (u,d) planes; planes is (3, R, R, C)."""
    return torch.cat([bilinear(planes[k], uvd[..., list(ax)]) for k, ax in enumerate(PLANE_AXES)], dim=-1)


def angular_features(normalized: torch.Tensor, planes: torch.Tensor) -> torch.Tensor:
    """Per-bone features averaged down each finger: F_i = delta_i at level 1, else (F_parent + delta_i)/2.

    ``normalized`` is (20, 2) with rows (a, f); ``planes`` is (20, A, A, C_a).
    """
    delta = torch.stack([bilinear(planes[b], normalized[b]) for b in range(NUM_BONES)])
    feats = [None] * NUM_BONES
    for b in range(NUM_BONES):
        parent = PARENTS[b + 1]
        feats[b] = delta[b] if parent == 0 else 0.5 * (feats[parent - 1] + delta[b])
    return torch.stack(feats)


def squash_offset(raw: torch.Tensor, max_offset: float) -> torch.Tensor:
    """Radial tanh: keeps direction, maps the norm into [0, max_offset)."""
    r = torch.sqrt((raw * raw).sum(-1, keepdim=True) + 1e-24)
    return raw * (max_offset * torch.tanh(r) / r)


def mlp(n_in: int, n_out: int, width: int = 128, hidden: int = 3) -> nn.Sequential:
    layers, n = [], n_in
    for _ in range(hidden):
        layers += [nn.Linear(n, width), nn.SiLU()]
        n = width
    last = nn.Linear(n, n_out)
    nn.init.zeros_(last.weight)
    nn.init.zeros_(last.bias)
    layers.append(last)
    return nn.Sequential(*layers)


@dataclass(frozen=True)
class AppearanceConfig:
    triplane_resolution: int = 64
    triplane_channels: int = 16
    angular_resolution: int = 16
    angular_channels: int = 8
    encoding_levels: int = 6
    width: int = 128
    hidden_layers: int = 3
    max_offset: float = MAX_OFFSET
    init_std: float = 0.01


class AppearanceModel(nn.Module):
    """Feature planes, both decoders and the per-Gaussian log scales."""

    def __init__(self, num_gaussians: int, config: AppearanceConfig = AppearanceConfig(),
                 isotropic: bool = True, init_scale: float = 0.002, seed: int = 0):
        super().__init__()
        self.config = config
        self.isotropic = isotropic
        c = config
        gen = torch.Generator().manual_seed(seed)
        self.triplane = nn.Parameter(
            torch.randn(3, c.triplane_resolution, c.triplane_resolution, c.triplane_channels, generator=gen)
            * c.init_std)
        self.angular = nn.Parameter(
            torch.randn(NUM_BONES, c.angular_resolution, c.angular_resolution, c.angular_channels, generator=gen)
            * c.init_std)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.identity_decoder = mlp(3 * c.triplane_channels, 7, c.width, c.hidden_layers)
            self.nonrigid_decoder = mlp(6 * c.encoding_levels + c.angular_channels, 3, c.width, c.hidden_layers)
        shape = (num_gaussians,) if isotropic else (num_gaussians, 3)
        self.log_scales = nn.Parameter(torch.full(shape, float(np.log(init_scale))))

    @property
    def num_gaussians(self) -> int:
        return self.log_scales.shape[0]

    def decode_identity(self, uvd: torch.Tensor):
        out = self.identity_decoder(triplane_features(self.triplane, uvd))
        offset = squash_offset(out[..., :3], self.config.max_offset)
        return offset, torch.sigmoid(out[..., 3:6]), torch.sigmoid(out[..., 6])

    def decode_nonrigid(self, encoding: torch.Tensor, bone_features: torch.Tensor):
        out = self.nonrigid_decoder(torch.cat([encoding, bone_features], dim=-1))
        return squash_offset(out, self.config.max_offset)

    def forward(self, uvd: torch.Tensor, bone_label: torch.Tensor, normalized_angles: torch.Tensor) -> dict:
        """Decode all Gaussians for one pose; ``bone_label`` holds values 1..20."""
        identity_offset, color, opacity = self.decode_identity(uvd)
        feats = angular_features(normalized_angles, self.angular)
        enc = positional_encode(uvd, self.config.encoding_levels)
        nonrigid = self.decode_nonrigid(enc, feats[bone_label.long() - 1])
        return {"identity_offset": identity_offset, "nonrigid_offset": nonrigid,
                "color": color, "opacity": opacity, "scales": torch.exp(self.log_scales)}

    def metadata(self) -> dict:
        return {"config": asdict(self.config), "isotropic": self.isotropic,
                "num_gaussians": self.num_gaussians}


# --------------------------------------------------------------------------
# checkpoint container: magic, u32 version, u32 meta length, meta JSON,
# u32 tensor count, tensor table, then f32 little-endian payloads


def save_checkpoint(model: AppearanceModel, path, extra: dict = None) -> None:
    meta = model.metadata()
    if extra:
        meta["extra"] = extra
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    state = model.state_dict()
    arrays = [(name, np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")) for name, t in state.items()]
    table = bytearray()
    offset = 0
    for name, arr in arrays:
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", 0, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", offset, arr.nbytes)
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)) + meta_bytes)
        fh.write(struct.pack("<I", len(arrays)) + bytes(table))
        for _, arr in arrays:
            fh.write(arr.tobytes())


def read_checkpoint(path):
    """Returns (meta dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    pos = 12
    meta = json.loads(data[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        dtype_code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        if dtype_code != 0:
            raise ValueError(f"{path}: unsupported tensor dtype code {dtype_code}")
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        off, nbytes = struct.unpack_from("<QQ", data, pos)
        pos += 16
        entries.append((name, shape, off, nbytes))
    tensors = {name: np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos + off).reshape(shape).copy()
               for name, shape, off, nbytes in entries}
    return meta, tensors


def load_checkpoint(path, num_gaussians: int = None) -> AppearanceModel:
    meta, tensors = read_checkpoint(path)
    if num_gaussians is not None and meta["num_gaussians"] != num_gaussians:
        raise IncompatibleCheckpointError(
            f"checkpoint holds {meta['num_gaussians']} Gaussians, template has {num_gaussians}")
    model = AppearanceModel(meta["num_gaussians"], AppearanceConfig(**meta["config"]), meta["isotropic"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model
