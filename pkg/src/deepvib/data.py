"""Datasets: MNIST IDX files, precomputed feature tables and synthetic blobs."""
from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .nn import ConfigError
from .numcore import DTYPE, Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    pass


class LabelRangeError(FormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise FormatError(f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")
        if self.inputs.shape[0] < 1:
            raise FormatError("dataset is empty")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx], split=split or self.split)


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dims: tuple[int, ...]

    @property
    def size(self) -> int:
        return 4 + 4 * len(self.dims)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> tuple[IdxHeader, np.ndarray]:
    """Parse an unsigned-byte IDX file (big-endian header)."""
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise FormatError(f"{path}: truncated header at offset 0")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC) or (
            expected_magic is not None and magic != expected_magic):
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated dimension list at offset 4")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    header = IdxHeader(magic, tuple(dims))
    count = int(np.prod(dims, dtype=np.int64))
    body = buf[header.size:]
    if len(body) < count:
        raise FormatError(f"{path}: truncated data at offset {header.size + len(body)}, "
                          f"expected {count} bytes after offset {header.size}")
    if len(body) > count:
        raise FormatError(f"{path}: {len(body) - count} trailing bytes at offset {header.size + count}")
    return header, np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        if array.min() < 0 or array.max() > 255:
            raise ValueError("IDX unsigned-byte data must lie in [0, 255]")
        array = array.astype(np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("only 1-d label and 3-d image arrays are supported")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes(order="C"))


def load_idx(images_path, labels_path, n_classes: int = 10, split: str = "train") -> Dataset:
    """Images flattened row-major to ``(N, rows*cols)`` bytes (as float64, 0..255)."""
    ih, images = read_idx(images_path, IDX_IMAGES_MAGIC)
    lh, labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if ih.dims[0] != lh.dims[0]:
        raise FormatError(f"{images_path} holds {ih.dims[0]} images but {labels_path} "
                          f"holds {lh.dims[0]} labels (count at offset 4)")
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise LabelRangeError(f"{labels_path}: label {labels[bad[0]]} out of range at offset {lh.size + bad[0]}")
    return Dataset(images.reshape(ih.dims[0], -1).astype(DTYPE), labels.astype(np.int64), n_classes, split)


def scale_to_pm1(data: Dataset) -> Dataset:
    """Map byte intensities ``[0, 255]`` onto ``[-1, 1]`` via ``x/127.5 - 1``."""
    return replace(data, inputs=data.inputs / 127.5 - 1.0)


def unscale_from_pm1(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x) + 1.0) * 127.5


def load_feature_csv(path, expected_dim: int | None = None, n_classes: int | None = None,
                     split: str = "train") -> Dataset:
    """Rows of ``D`` floats followed by an integer label; an optional
    non-numeric first line is treated as a header. Features are used as-is."""
    rows, labels = [], []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row[:-1]]
                lab = float(row[-1])
            except ValueError:
                if lineno == 1:
                    continue
                raise FormatError(f"{path}:{lineno}: non-numeric cell")
            if lab != int(lab):
                raise FormatError(f"{path}:{lineno}: label {row[-1]!r} is not an integer")
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise FormatError(f"{path}:{lineno}: expected {width + 1} columns, got {len(row)}")
            rows.append(vals)
            labels.append(int(lab))
    if not rows:
        raise FormatError(f"{path}: no data rows")
    if expected_dim is not None and width != expected_dim:
        raise ConfigError(f"{path}: feature dimension {width} does not match expected {expected_dim}")
    labels = np.asarray(labels, dtype=np.int64)
    C = n_classes if n_classes is not None else int(labels.max()) + 1
    return Dataset(np.asarray(rows, dtype=DTYPE), labels, C, split)


def spread_directions(C: int, D: int, rng: Rng | None = None) -> np.ndarray:
    """``C`` unit vectors in ``R^D`` placed as far apart as is easy to construct:
    evenly spaced on the circle for ``D=2``, a regular simplex when
    ``C <= D + 1``, random otherwise."""
    if C == 1:
        v = np.zeros((1, D))
        v[0, 0] = 1.0
        return v
    if D == 2:
        a = 2 * np.pi * np.arange(C) / C
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    if C <= D + 1:
        e = np.eye(C) - 1.0 / C
        # orthonormal basis of the centred one-hot span, rows in R^(C-1)
        u, s, vt = np.linalg.svd(e)
        coords = u[:, : C - 1] * s[: C - 1]
        coords /= np.linalg.norm(coords, axis=1, keepdims=True)
        out = np.zeros((C, D))
        out[:, : C - 1] = coords
        return out
    rng = rng or Rng(0, ("directions",))
    v = rng.normal((C, D))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def synth_blobs(rng: Rng, n_classes: int, per_class: int, dim: int, separation: float,
                split: str = "train") -> Dataset:
    """Isotropic unit-variance Gaussian blobs centred at ``separation * u_c``,
    shrunk by ``1/(separation + 4)`` and clipped to ``[-1, 1]``."""
    if min(n_classes, per_class, dim) < 1 or separation < 0:
        raise ConfigError("synth_blobs needs positive sizes and non-negative separation")
    centers = separation * spread_directions(n_classes, dim, rng.substream("directions"))
    labels = np.repeat(np.arange(n_classes), per_class)
    x = centers[labels] + rng.substream("noise").normal((labels.size, dim))
    order = rng.substream("order").permutation(labels.size)
    x = np.clip(x[order] / (separation + 4.0), -1.0, 1.0)
    return Dataset(x, labels[order], n_classes, split)


def mnist_bundled() -> Dataset:
    """The 5,000-image MNIST sample shipped with ``mlxtend`` (500 per digit),
    as unscaled bytes. Requires ``mlxtend`` to be installed."""
    try:
        from importlib.resources import files
        blob = (files("mlxtend.data") / "data" / "mnist_5k.csv.gz").read_bytes()
    except (ModuleNotFoundError, FileNotFoundError) as err:
        raise FileNotFoundError("bundled MNIST sample needs the 'mlxtend' package") from err
    table = np.loadtxt(io.BytesIO(gzip.decompress(blob)), delimiter=",", dtype=DTYPE)
    return Dataset(table[:, :-1], table[:, -1].astype(np.int64), 10, "all")


def stratified_split(data: Dataset, test_per_class: int, rng: Rng) -> tuple[Dataset, Dataset]:
    """Shuffle, then move the first ``test_per_class`` examples of each class
    to the test split."""
    order = rng.permutation(len(data))
    test_idx = []
    for c in range(data.n_classes):
        test_idx.extend(order[data.labels[order] == c][:test_per_class])
    test_mask = np.zeros(len(data), dtype=bool)
    test_mask[test_idx] = True
    train_idx = order[~test_mask[order]]
    test_idx = order[test_mask[order]]
    return data.subset(train_idx, "train"), data.subset(test_idx, "test")


def mnist_desk_split(seed: int = 0, test_per_class: int = 100) -> tuple[Dataset, Dataset]:
    """Scaled train/test split of the bundled MNIST sample (4,000 / 1,000)."""
    train, test = stratified_split(mnist_bundled(), test_per_class, Rng(seed, ("mnist_split",)))
    return scale_to_pm1(train), scale_to_pm1(test)
