"""Dense linear-algebra kernel: covariance, symmetric eigendecomposition,
Frobenius distance, and seeded Gaussian matrices.

Everything runs in float64 and is deterministic for identical inputs.
Random matrices come from a Philox counter-based generator, so a 64-bit
seed pins the output bit-for-bit across platforms and processes.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, DegenerateBatchError, NumericalFailureError

# Max |A - A.T| entry tolerated before sym_eig rejects the input.
SYMMETRY_TOL = 1e-8


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for a (seed, stream) pair.

    Distinct stream tuples under the same seed yield statistically
    independent, reproducible streams.
    """
    if seed < 0:
        raise ContractViolation(f"seed must be non-negative, got {seed}")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(stream))
    return np.random.Generator(np.random.Philox(seq))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-d float64 array or raise ContractViolation."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ContractViolation(f"{name} must be 2-dimensional, got shape {a.shape}")
    if a.size and not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return a


def covariance(batch) -> np.ndarray:
    """Unbiased feature covariance of a row-wise sample matrix.

    Rows are observations, columns are features; the 1/(n-1) estimator is
    used and the result is explicitly symmetrized so downstream consumers
    can rely on exact symmetry.
    """
    a = as_matrix(batch, "batch")
    if a.shape[0] < 2:
        raise DegenerateBatchError(
            f"covariance needs at least 2 rows, got {a.shape[0]}"
        )
    centered = a - a.mean(axis=0)
    cov = centered.T @ centered / (a.shape[0] - 1)
    return (cov + cov.T) / 2.0


class EigenPair(NamedTuple):
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns; column i pairs with eigenvalues[i]


def sym_eig(matrix) -> EigenPair:
    """Full eigendecomposition of a symmetric matrix.

    Eigenvalues come back ascending with orthonormal eigenvectors in the
    matching column order. Inputs asymmetric beyond SYMMETRY_TOL are a
    contract violation; solver non-convergence or non-finite output is a
    numerical failure.
    """
    m = as_matrix(matrix, "matrix")
    if m.shape[0] != m.shape[1]:
        raise ContractViolation(f"matrix must be square, got shape {m.shape}")
    if m.size and float(np.max(np.abs(m - m.T))) > SYMMETRY_TOL:
        raise ContractViolation(
            f"matrix is not symmetric within {SYMMETRY_TOL:g}"
        )
    sym = (m + m.T) / 2.0
    try:
        values, vectors = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"eigendecomposition failed: {exc}") from exc
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(vectors))):
        raise NumericalFailureError("eigendecomposition produced non-finite output")
    return EigenPair(values, vectors)


def frobenius_distance(a, b) -> float:
    """Frobenius norm of the elementwise difference of two equal-shape matrices."""
    x = as_matrix(a, "a")
    y = as_matrix(b, "b")
    if x.shape != y.shape:
        raise ContractViolation(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.linalg.norm(x - y))


def gaussian_matrix(rows: int, cols: int, seed: int) -> np.ndarray:
    """Standard-normal matrix drawn from a dedicated Philox stream.

    The same (rows, cols, seed) triple reproduces the matrix bit-for-bit.
    """
    if rows < 1 or cols < 1:
        raise ContractViolation(f"matrix dimensions must be positive, got {rows}x{cols}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return rng.standard_normal((rows, cols))
