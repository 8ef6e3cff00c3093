"""Numeric primitives and seeded randomness.

Tensors are plain ``numpy.ndarray`` values (C order, float64 unless a
caller opts into float32 for training).
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DegeneracyError, DimensionError

__all__ = ["Rng", "derive_seed", "dot", "l2_norm", "gram_schmidt_rows", "gaussian"]


def derive_seed(master_seed: int, tag: str) -> int:
    """64-bit sub-stream seed: first 8 bytes (little-endian) of
    SHA-256(``"<master_seed>/<tag>"``)."""
    digest = hashlib.sha256(f"{int(master_seed)}/{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """PCG64 stream seeded through ``numpy.random.SeedSequence``.

    PCG64 output is specified bit-for-bit by numpy, so a seed names the same
    stream on every platform. ``child(tag)`` gives an independent stream whose
    seed is ``derive_seed(seed, tag)``.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, tag: str) -> "Rng":
        return Rng(derive_seed(self.seed, tag))

    def __repr__(self):
        return f"Rng(seed={self.seed}, algorithm={self.algorithm!r})"


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.shape}")
    return v


def dot(a, b) -> float:
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(a @ b)


def l2_norm(v) -> float:
    v = _as_vector(v)
    return float(np.sqrt(v @ v))


def gram_schmidt_rows(m, reorth_passes: int = 1, tol: float = 1e-10) -> np.ndarray:
    """Orthonormalize the rows of ``m`` with modified Gram-Schmidt.

    Each row is projected against the already-accepted rows ``1 + reorth_passes``
    times. If a row still looks rank deficient (its residual norm is below
    ``tol`` times its original norm) up to three extra passes are tried before
    giving up with :class:`DegeneracyError`.
    """
    m = np.array(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    rows, cols = m.shape
    if rows > cols:
        raise DimensionError(f"{rows} rows cannot be orthonormal in {cols} dimensions")
    q = np.zeros_like(m)
    for i in range(rows):
        v = m[i].copy()
        start = np.linalg.norm(v)
        if start == 0.0:
            raise DegeneracyError(f"row {i} is zero")
        passes = 1 + reorth_passes
        done = 0
        while True:
            for _ in range(passes):
                for j in range(i):
                    v -= (q[j] @ v) * q[j]
            done += passes
            norm = np.linalg.norm(v)
            if norm > tol * start:
                break
            if done >= 1 + reorth_passes + 3:
                raise DegeneracyError(f"row {i} is linearly dependent on earlier rows")
            passes = 1
        q[i] = v / norm
    return q


def gaussian(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return np.full(shape, float(mean))
    return rng.generator.normal(mean, std, size=shape)
