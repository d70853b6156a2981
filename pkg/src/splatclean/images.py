"""PNG and PFM file helpers.

PNG: 8-bit, raw [0,1] values (no sRGB linearization on load, by design).
PFM: 32-bit float little-endian grayscale, rows bottom-to-top per the format.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as float64 RGB in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_png(image: np.ndarray, path) -> None:
    """Write a float [0,1] RGB or grayscale array as 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


def load_mask_png(path) -> np.ndarray:
    """Boolean mask from an 8-bit PNG; nonzero = True."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 0


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_pfm(path) -> np.ndarray:
    """Read a grayscale PFM as float64 (H, W)."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ValueError(f"{path}: expected grayscale PFM magic 'Pf', got {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype)
        if data.size != w * h:
            raise ValueError(f"{path}: PFM payload truncated")
    grid = data.reshape(h, w).astype(np.float64)
    return grid[::-1].copy()  # PFM rows are bottom-to-top


def save_pfm(grid: np.ndarray, path) -> None:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("PFM writer expects a 2D grid")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(grid[::-1].astype("<f4").tobytes())
