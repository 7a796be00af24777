"""PNG image and mask I/O plus small file utilities."""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

MASK_THRESHOLD = 128  # 8-bit gray at or above this is foreground


def load_image(path) -> np.ndarray:
    """Read a PNG as (H, W, 3) float64 RGB in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def save_image(path, array) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Read a PNG as a boolean mask (8-bit gray thresholded at 128)."""
    with Image.open(path) as img:
        gray = img.convert("L")
        return np.asarray(gray, dtype=np.uint8) >= MASK_THRESHOLD


def save_mask(path, mask) -> None:
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
