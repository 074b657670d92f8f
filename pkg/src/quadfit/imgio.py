"""Image file I/O: 8-bit PNG masks/backgrounds and float32 PFM depth maps.

Depth maps use the PFM convention (grayscale "Pf", negative scale for
little-endian, scanlines bottom to top). Infinite background depths are
stored as the sentinel 3.4e38 and restored to +inf on load.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import ParseError

DEPTH_SENTINEL = 3.4e38


def save_mask_png(mask: np.ndarray, path) -> None:
    arr = (np.asarray(mask).astype(bool) * np.uint8(255))
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def save_rgb_png(image: np.ndarray, path) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected (H, W, 3) uint8 image")
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_pfm(depth: np.ndarray, path) -> None:
    data = np.asarray(depth, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("expected a 2-D depth map")
    data = np.where(np.isfinite(data), data, DEPTH_SENTINEL).astype("<f4")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).tobytes())


def load_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into float64 with the sentinel mapped to +inf."""
    with open(path, "rb") as f:
        raw = f.read()
    try:
        header, dims, scale, rest = raw.split(b"\n", 3)
        if header != b"Pf":
            raise ParseError(f"not a grayscale PFM (header {header!r})")
        w, h = (int(v) for v in dims.split())
        scale = float(scale)
    except (ValueError, IndexError) as e:
        raise ParseError(f"bad PFM header: {e}") from e
    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * 4
    if len(rest) < expected:
        raise ParseError(f"PFM truncated: {len(rest)} bytes, expected {expected}")
    data = np.frombuffer(rest[:expected], dtype=dtype).reshape(h, w)
    data = np.flipud(data).astype(np.float64)
    return np.where(data >= DEPTH_SENTINEL * 0.999, np.inf, data)
