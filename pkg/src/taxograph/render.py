"""Binary PPM output for label maps and feature magnitudes."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def palette(n: int) -> np.ndarray:
    """``n`` x 3 uint8 colours; label 0 is black.  Bit-interleaved, as in the VOC devkit."""
    out = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        c, r, g, b = i, 0, 0, 0
        for shift in range(7, -1, -1):
            r |= ((c >> 0) & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
        out[i] = (r, g, b)
    return out


def label_image(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")
    return palette(num_classes)[labels]


def magnitude_image(features: np.ndarray) -> np.ndarray:
    """Grey image of per-pixel feature norm, scaled so the largest norm is white."""
    mag = np.linalg.norm(features, axis=-1)
    top = mag.max()
    grey = np.zeros_like(mag) if top == 0 else mag / top
    g = np.round(grey * 255).astype(np.uint8)
    return np.stack([g, g, g], axis=-1)


def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError("scale factor must be at least 1")
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def ppm_bytes(img: np.ndarray) -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {img.shape}")
    H, W, _ = img.shape
    return f"P6\n{W} {H}\n255\n".encode("ascii") + img.tobytes()


def write_ppm(path: str | Path, img: np.ndarray, scale: int = 1) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ppm_bytes(upscale(img, scale)))
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H, depth = int(parts[1]), int(parts[2]), int(parts[3])
    if depth != 255:
        raise ValueError(f"{path}: unsupported max value {depth}")
    return np.frombuffer(parts[4], dtype=np.uint8)[: H * W * 3].reshape(H, W, 3)
