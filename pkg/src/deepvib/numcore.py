"""Dense numerical primitives, reproducible random streams and finite differences.

Everything runs in float64. Random streams are derived from a single integer
seed through :class:`numpy.random.SeedSequence` spawn keys driving a Philox
counter generator, so any ``(purpose, epoch, batch, ...)`` tuple addresses an
independent substream that is identical across runs and platforms.
"""
from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matmul produced non-finite entries")
    return out


def naive_matmul(a, b) -> np.ndarray:
    """Triple-loop reference product, kept as a test oracle for :func:`matmul`."""
    a, b = as_matrix(a), as_matrix(b)
    n, m = a.shape
    m2, p = b.shape
    if m != m2:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((n, p), dtype=DTYPE)
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for k in range(m):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError("stream keys must be non-negative")
    return part


class Rng:
    """Seeded stream of draws; ``substream`` forks independent child streams.

    Two ``Rng`` objects built from the same seed and key path produce the same
    draws. The object itself is single-owner: share keys, not instances.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(_key(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def substream(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key(k) for k in keys))

    def normal(self, size) -> np.ndarray:
        return self.generator.standard_normal(size, dtype=DTYPE)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def sample_standard_normal(rng: Rng, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.normal(n)


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=DTYPE, copy=True)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta))
        flat[i] = orig - h
        fm = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)
