"""Deterministic dense linear algebra over 2-D float64 matrices.

A "matrix" throughout the package is a C-contiguous 2-D float64 numpy
array. Products and decompositions are delegated to numpy/LAPACK; the
reference oracles (triple loops, Frobenius identities) live in the test
suite so the two sides stay independent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "Spectrum",
    "as_matrix",
    "check_finite",
    "matmul",
    "row_softmax",
    "softmax_stable",
    "svd_spectrum",
    "numerical_rank",
    "seeded_gaussian",
    "derive_seed",
    "matrix_checksum",
]

DEFAULT_RANK_TOL = 1e-6


class ShapeError(ValueError):
    """Operand shapes do not line up."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 C-contiguous array, rejecting other ranks."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product; rejects mismatched inner dimensions."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax along each row, computed with max-subtraction."""
    m = as_matrix(m, "logits")
    if m.shape[1] < 1:
        raise ValueError("softmax of an empty row")
    shifted = m - np.max(m, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def softmax_stable(v) -> np.ndarray:
    """Softmax of a vector: nonnegative, sums to one, overflow-safe."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    check_finite(v, "softmax input")
    return row_softmax(v.reshape(1, -1))[0]


@dataclass(frozen=True)
class Spectrum:
    """Singular values in descending order, all nonnegative."""

    singular_values: np.ndarray

    def __post_init__(self):
        sv = np.asarray(self.singular_values, dtype=np.float64)
        object.__setattr__(self, "singular_values", sv)
        if sv.size and (np.any(sv < 0) or np.any(np.diff(sv) > 0)):
            raise ValueError("singular values must be nonnegative and descending")


def svd_spectrum(m: np.ndarray) -> Spectrum:
    """Singular values of ``m``, descending (LAPACK gesdd)."""
    m = check_finite(as_matrix(m), "svd input")
    return Spectrum(np.linalg.svd(m, compute_uv=False))


def numerical_rank(m: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Count singular values above ``rel_tol`` times the largest one.

    The zero matrix has rank 0. ``rel_tol`` must lie in (0, 1).
    """
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must be in (0,1), got {rel_tol}")
    sv = svd_spectrum(m).singular_values
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rel_tol * sv[0]))


def seeded_gaussian(rows: int, cols: int, std: float, seed: int) -> np.ndarray:
    """Reproducible Gaussian matrix: PCG64(seed), row-major fill, scaled by std.

    Same (rows, cols, std, seed) gives bitwise-identical output. The
    generator is numpy's PCG64 with ziggurat standard normals, filling the
    array in C (row-major) order, then multiplied by ``std``.
    """
    if std < 0:
        raise ValueError("std must be nonnegative")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((rows, cols)) * std


def derive_seed(master: int, *tags) -> int:
    """Stable 64-bit sub-seed from a master seed and a tag path.

    SHA-256 over ``"{master}/{tag}/{tag}/..."``, first 8 bytes little-endian.
    Used so every tensor in a model gets its own documented seed stream.
    """
    key = "/".join([str(int(master))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def matrix_checksum(arrays) -> str:
    """SHA-256 hex digest over the bytes of the given arrays, in order."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()
