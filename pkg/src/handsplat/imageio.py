"""PNG (8-bit) and PFM (float32, little-endian) image files."""
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image) -> None:
    """Write an H×W×3 RGB or H×W grayscale image with values in [0, 1]."""
    data = to_uint8(image)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(Path(path), format="PNG")


def read_png(path, gray: bool = False) -> np.ndarray:
    with Image.open(Path(path)) as im:
        im = im.convert("L" if gray else "RGB")
        return np.asarray(im, dtype=np.float32) / 255.0


def write_pfm(path, image) -> None:
    data = np.asarray(image, dtype="<f4")
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs H×W or H×W×3, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{w} {h}\n".encode())
        # negative scale marks little-endian payload
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if tag == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)
