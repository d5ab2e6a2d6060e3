"""Dataset ingestion: IDX image files, label-first CSV, seeded synthetic sets."""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .diffnet import DatasetSplit

DATASET_KINDS = ("idx-images", "csv-vectors", "synthetic-blobs", "synthetic-images")

IDX_UBYTE = 0x08
# type code -> (numpy dtype, size in bytes), big endian
_IDX_TYPES = {0x08: (">u1", 1), 0x09: (">i1", 1), 0x0B: (">i2", 2), 0x0C: (">i4", 4),
              0x0D: (">f4", 4), 0x0E: (">f8", 8)}


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------- IDX


def read_idx(path) -> np.ndarray:
    """Parse an IDX file: two zero bytes, a type code, a dim count, then
    big-endian uint32 dims followed by the data."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetError(f"{path}: too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_TYPES or ndim == 0:
        raise DatasetError(f"{path}: bad IDX magic number 0x{int.from_bytes(raw[:4], 'big'):08x}")
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise DatasetError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:hdr])
    dt, size = _IDX_TYPES[dtype_code]
    count = int(np.prod(dims))
    if len(raw) - hdr != count * size:
        raise DatasetError(f"{path}: expected {count * size} data bytes, found {len(raw) - hdr}")
    return np.frombuffer(raw, dtype=dt, offset=hdr).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise DatasetError("only uint8 IDX output is supported")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, IDX_UBYTE, a.ndim))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def _labels_path_for(images_path: Path) -> Path:
    name = images_path.name
    for a, b in (("images", "labels"), ("idx3", "idx1")):
        if a in name:
            return images_path.with_name(name.replace(a, b))
    return images_path.with_name(images_path.stem + "-labels" + images_path.suffix)


def load_idx_images(path, labels_path=None, num_classes=None) -> DatasetSplit:
    path = Path(path)
    images = read_idx(path)
    if images.dtype != np.uint8 or images.ndim < 3:
        raise DatasetError(f"{path}: expected uint8 images with dims N x H x W")
    labels_path = Path(labels_path) if labels_path else _labels_path_for(path)
    if labels_path.exists():
        labels = read_idx(labels_path)
        if labels.ndim != 1 or len(labels) != len(images):
            raise DatasetError(f"{labels_path}: label count does not match {len(images)} images")
    else:
        labels = np.zeros(len(images), dtype=np.int64)
    labels = labels.astype(np.int64)
    _check_labels(labels, num_classes, path)
    return DatasetSplit(images.astype(np.float64) / 255.0, labels, path.stem)


# ---------------------------------------------------------------------- CSV


def load_csv_vectors(path, num_classes=None) -> DatasetSplit:
    """Rows of ``label,feature,...``; blank lines and ``#`` comments skipped."""
    path = Path(path)
    rows, labels = [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
                if width < 2:
                    raise DatasetError(f"{path}:{lineno}: need a label and at least one feature")
            elif len(parts) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} columns, found {len(parts)}")
            try:
                label = float(parts[0])
                feats = [float(v) for v in parts[1:]]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric field") from None
            if label != int(label):
                raise DatasetError(f"{path}:{lineno}: label must be an integer")
            labels.append(int(label))
            rows.append(feats)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(labels, num_classes, path)
    return DatasetSplit(np.asarray(rows, dtype=np.float64), labels, path.stem)


def write_csv_vectors(path, data: DatasetSplit) -> None:
    with open(path, "w") as fh:
        for x, y in zip(data.inputs.reshape(len(data), -1), data.labels):
            fh.write(",".join([str(int(y))] + [repr(float(v)) for v in x]) + "\n")


def _check_labels(labels, num_classes, where):
    if labels.size and labels.min() < 0:
        raise DatasetError(f"{where}: negative label")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise DatasetError(f"{where}: label {labels.max()} out of range for {num_classes} classes")


# ---------------------------------------------------------------- synthetic


def make_blobs(n: int = 200, num_classes: int = 2, dim: int = 2, separation: float = 6.0,
               sigma: float = 0.05, seed: int = 0) -> DatasetSplit:
    """Isotropic Gaussian clusters whose centres sit ``separation`` sigmas apart.

    Centres are placed on the vertices of a regular simplex scaled so any two
    are exactly ``separation * sigma`` apart; points are split evenly. The
    small default sigma keeps a class centroid within a few dozen 0.01-sized
    ascent steps of the decision boundary.
    """
    if num_classes < 2 or dim < 1:
        raise DatasetError("blobs need at least 2 classes and 1 dimension")
    rng = np.random.default_rng(seed)
    if num_classes == 2:
        centres = np.zeros((2, dim))
        centres[0, 0], centres[1, 0] = -separation * sigma / 2, separation * sigma / 2
    else:
        if dim < num_classes - 1:
            raise DatasetError("need dim >= num_classes - 1 for equidistant centres")
        eye = np.eye(num_classes)
        simplex = eye - eye.mean(axis=0)
        # orthonormal basis of the simplex's span, first num_classes-1 directions
        q, _ = np.linalg.qr(simplex.T)
        pts = simplex @ q[:, : num_classes - 1]
        pts *= separation * sigma / np.linalg.norm(pts[0] - pts[1])
        centres = np.zeros((num_classes, dim))
        centres[:, : num_classes - 1] = pts
    labels = np.arange(n) % num_classes
    inputs = centres[labels] + sigma * rng.standard_normal((n, dim))
    return DatasetSplit(inputs, labels, "blobs")


def make_bar_images(n: int = 400, size: int = 8, num_classes: int = 2, noise: float = 0.25,
                    seed: int = 0) -> DatasetSplit:
    """Small grayscale images in [0, 1] showing one bar on a noisy background.

    Class 0 is a horizontal bar, 1 vertical, 2 the main diagonal and 3 the
    anti-diagonal; the bar position is random for classes 0 and 1.
    """
    if not 2 <= num_classes <= 4:
        raise DatasetError("bar images support 2 to 4 classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    imgs = noise * rng.uniform(size=(n, size, size))
    ar = np.arange(size)
    for k, y in enumerate(labels):
        level = rng.uniform(0.6, 1.0)
        pos = rng.integers(1, size - 1)
        if y == 0:
            imgs[k, pos, :] = level
        elif y == 1:
            imgs[k, :, pos] = level
        elif y == 2:
            imgs[k, ar, ar] = level
        else:
            imgs[k, ar, size - 1 - ar] = level
    return DatasetSplit(np.clip(imgs, 0.0, 1.0), labels, "bars")


def _parse_params(spec: str) -> dict:
    out = {}
    for item in filter(None, (s.strip() for s in (spec or "").split(","))):
        if "=" not in item:
            raise DatasetError(f"synthetic dataset parameter {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = float(v) if "." in v or "e" in v.lower() else int(v)
    return out


def load_dataset(path, kind: str, num_classes=None, seed: int = 0, labels_path=None) -> DatasetSplit:
    """Load a dataset split.

    For the synthetic kinds ``path`` is a comma-separated ``key=value`` list
    (for example ``n=200,dim=2``) or empty; ``seed`` fixes the draw.
    """
    if kind == "idx-images":
        if not path or not os.path.exists(path):
            raise DatasetError(f"dataset file not found: {path}")
        return load_idx_images(path, labels_path, num_classes)
    if kind == "csv-vectors":
        if not path or not os.path.exists(path):
            raise DatasetError(f"dataset file not found: {path}")
        return load_csv_vectors(path, num_classes)
    if kind == "synthetic-blobs":
        params = _parse_params(path)
        params.setdefault("seed", seed)
        if num_classes is not None:
            params.setdefault("num_classes", num_classes)
        try:
            return make_blobs(**params)
        except TypeError as exc:
            raise DatasetError(f"bad blobs parameter: {exc}") from None
    if kind == "synthetic-images":
        params = _parse_params(path)
        params.setdefault("seed", seed)
        if num_classes is not None:
            params.setdefault("num_classes", num_classes)
        try:
            return make_bar_images(**params)
        except TypeError as exc:
            raise DatasetError(f"bad image parameter: {exc}") from None
    raise DatasetError(f"unknown dataset kind {kind!r}; expected one of {DATASET_KINDS}")
