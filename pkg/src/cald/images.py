"""PNG / binary PPM reading and writing for [1, 3, H, W] float arrays in [0, 1]."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

_FORMATS = {".png": "PNG", ".ppm": "PPM", ".pnm": "PPM"}


class ImageError(ValueError):
    pass


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageError(f"{path}: cannot decode image ({exc})") from exc
    return to_tensor(rgb)


def to_tensor(rgb: np.ndarray) -> np.ndarray:
    """uint8 [H, W, 3] -> float32 [1, 3, H, W] scaled to [0, 1]."""
    return (np.asarray(rgb, np.float32) / 255.0).transpose(2, 0, 1)[None].copy()


def to_uint8(x: np.ndarray) -> np.ndarray:
    """float [1, 3, H, W] in [0, 1] -> uint8 [H, W, 3]."""
    x = np.clip(np.asarray(x, np.float64)[0], 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def image_format(path) -> str:
    fmt = _FORMATS.get(Path(path).suffix.lower())
    if fmt is None:
        raise ImageError(f"{path}: output must end in .png or .ppm")
    return fmt


def write_image(path, x: np.ndarray):
    """Write atomically (temp file then rename); format follows the extension."""
    fmt = image_format(path)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        Image.fromarray(to_uint8(x), "RGB").save(tmp, format=fmt)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def atomic_write_bytes(path, data: bytes):
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
