"""Image file I/O and resampling.

PFM (32-bit float, grayscale) is the format of record for target images;
8-bit PNGs are written alongside for inspection only.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

__all__ = ["save_pfm", "load_pfm", "save_png", "box_resample"]


def save_pfm(image: np.ndarray, path) -> None:
    """Grayscale PFM, little-endian, rows stored bottom-up per the format."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D grayscale image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise ValueError(f"{path}: expected grayscale PFM (header 'Pf'), got {header!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PFM payload")
    return data.reshape(h, w)[::-1].astype(np.float64)


def save_png(image: np.ndarray, path) -> None:
    """Clamp to [0, 1], scale to 8-bit grayscale."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def _overlap_weights(n_src: int, n_dst: int) -> np.ndarray:
    """Row-stochastic matrix averaging n_src pixels into n_dst by interval
    overlap (exact box filter for any size ratio)."""
    edges_src = np.arange(n_src + 1) * (n_dst / n_src)
    w = np.zeros((n_dst, n_src))
    for j in range(n_src):
        a, b = edges_src[j], edges_src[j + 1]
        lo, hi = int(np.floor(a)), int(np.ceil(b))
        for i in range(lo, min(hi, n_dst)):
            w[i, j] = max(0.0, min(b, i + 1) - max(a, i))
    return w / w.sum(axis=1, keepdims=True)


def box_resample(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-weighted (box filter) resample to the given size."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape == (height, width):
        return img.copy()
    wy = _overlap_weights(img.shape[0], height)
    wx = _overlap_weights(img.shape[1], width)
    return wy @ img @ wx.T
