"""8-bit PNG round trips between disk and the internal ``[-1, 1]`` range."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MaskValidationError


def to_uint8(x) -> np.ndarray:
    """Map ``[-1, 1]`` linearly to ``[0, 255]`` with round-half-up."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.floor((x + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(u) -> np.ndarray:
    return np.asarray(u, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def write_image(path, chw) -> None:
    """Write a ``(C, H, W)`` float image in ``[-1, 1]`` as an 8-bit PNG."""
    u = to_uint8(chw)
    arr = u[0] if u.shape[0] == 1 else np.transpose(u, (1, 2, 0))
    _save(path, Image.fromarray(arr))


def write_image_uint8(path, hwc_or_hw: np.ndarray) -> None:
    _save(path, Image.fromarray(np.asarray(hwc_or_hw, dtype=np.uint8)))


def read_image(path, channels: int = 3) -> np.ndarray:
    """Read a PNG as a ``(C, H, W)`` float32 array in ``[-1, 1]``."""
    img = Image.open(path)
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img)
    arr = arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1))
    return from_uint8(arr)


def write_mask(path, m) -> None:
    """Write a binary ``(H, W)`` mask as single-channel 8-bit with values {0, 255}."""
    m = np.asarray(m)
    m = m.reshape(m.shape[-2:])
    if not np.isin(m, (0, 1)).all():
        raise MaskValidationError(f"refusing to write non-binary mask to {path}")
    _save(path, Image.fromarray((m.astype(np.uint8) * 255)))


def read_mask(path) -> np.ndarray:
    """Read a mask file as a ``(H, W)`` float32 array in {0, 1}; any nonzero pixel is foreground."""
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.float32)


def _save(path, img: Image.Image) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG")
    os.replace(tmp, path)
