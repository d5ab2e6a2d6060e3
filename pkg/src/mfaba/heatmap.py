"""Grayscale heatmaps of attribution maps (binary PGM, optional PNG)."""
from __future__ import annotations

import os
import re
import tempfile

import numpy as np


def heatmap_array(scores, input_shape=None) -> np.ndarray:
    """Absolute scores summed over channels, min-max scaled to uint8.

    ``(C, H, W)`` maps collapse to ``H x W``; 1-D maps become a single row.
    A constant map renders as all zeros.
    """
    a = np.abs(np.asarray(scores, dtype=np.float64))
    shape = a.shape if input_shape is None else tuple(input_shape)
    if len(shape) == 3:
        a = a.sum(axis=0)
    elif len(shape) == 1:
        a = a.reshape(1, -1)
    elif len(shape) != 2:
        raise ValueError(f"cannot render a heatmap for shape {shape}")
    lo, hi = a.min(), a.max()
    if not hi > lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    # header tokens, then exactly one whitespace byte before the pixels
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None or int(m.group(3)) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = raw[m.end():]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def atomic_write(path, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_pgm(path, img: np.ndarray) -> None:
    atomic_write(path, pgm_bytes(img))


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)
