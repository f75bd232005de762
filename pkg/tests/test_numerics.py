import numpy as np
import pytest

from omnialign.errors import ContractViolation, DegenerateBatchError
from omnialign.numerics import (
    covariance,
    frobenius_distance,
    gaussian_matrix,
    make_rng,
    sym_eig,
)


def test_covariance_matches_manual_small_case():
    x = np.array([[1.0, 2.0], [3.0, 0.0], [5.0, 4.0]])
    centered = x - x.mean(axis=0)
    expected = centered.T @ centered / 2.0
    got = covariance(x)
    assert np.allclose(got, expected, atol=1e-15)


def test_covariance_is_exactly_symmetric_and_psd():
    rng = make_rng(100)
    for _ in range(20):
        x = rng.standard_normal((6, 5)) * rng.uniform(0.1, 10.0)
        c = covariance(x)
        assert np.array_equal(c, c.T)
        eigvals = np.linalg.eigvalsh(c)
        assert eigvals.min() >= -1e-10


def test_covariance_constant_column_is_zero():
    x = np.column_stack([np.full(8, 3.5), np.arange(8.0)])
    c = covariance(x)
    assert np.all(c[0] == 0.0)
    assert np.all(c[:, 0] == 0.0)


def test_covariance_rejects_single_row():
    with pytest.raises(DegenerateBatchError):
        covariance(np.ones((1, 4)))


def test_covariance_rejects_non_finite():
    x = np.ones((3, 2))
    x[1, 1] = np.inf
    with pytest.raises(ContractViolation):
        covariance(x)


def _charpoly_eigenvalues(matrix: np.ndarray) -> np.ndarray:
    # Independent oracle: characteristic polynomial via the
    # Faddeev-LeVerrier recurrence, then polynomial root finding.
    n = matrix.shape[0]
    coeffs = [1.0]
    aux = np.zeros_like(matrix)
    c = 1.0
    for k in range(1, n + 1):
        aux = matrix @ aux + c * np.eye(n)
        c = -np.trace(matrix @ aux) / k
        coeffs.append(c)
    roots = np.roots(coeffs)
    return np.sort(roots.real)


def test_sym_eig_matches_charpoly_oracle():
    rng = make_rng(101)
    for size in (2, 3, 4, 5):
        for _ in range(5):
            g = rng.standard_normal((size, size))
            sym = (g + g.T) / 2.0
            got = sym_eig(sym).eigenvalues
            expected = _charpoly_eigenvalues(sym)
            assert np.allclose(got, expected, atol=1e-8)


def test_sym_eig_reconstruction_and_orthonormality():
    rng = make_rng(102)
    for size in (2, 3, 6, 9):
        g = rng.standard_normal((size, size))
        sym = (g + g.T) / 2.0
        values, vectors = sym_eig(sym)
        assert np.all(np.diff(values) >= 0)
        recon = vectors @ np.diag(values) @ vectors.T
        assert np.max(np.abs(recon - sym)) < 1e-8
        gram = vectors.T @ vectors
        assert np.max(np.abs(gram - np.eye(size))) < 1e-10


def test_sym_eig_diagonal_is_exact():
    values, vectors = sym_eig(np.diag([3.0, -1.0, 2.0]))
    assert np.allclose(values, [-1.0, 2.0, 3.0], atol=1e-14)
    assert np.allclose(np.abs(vectors), np.eye(3)[:, [1, 2, 0]], atol=1e-14)


def test_sym_eig_rejects_asymmetric():
    bad = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ContractViolation):
        sym_eig(bad)


def test_sym_eig_rejects_non_square():
    with pytest.raises(ContractViolation):
        sym_eig(np.ones((2, 3)))


def test_sym_eig_accepts_roundoff_asymmetry():
    sym = np.array([[2.0, 1.0], [1.0 + 1e-12, 2.0]])
    values, _ = sym_eig(sym)
    assert np.allclose(values, [1.0, 3.0], atol=1e-9)


def test_frobenius_distance_hand_value():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0, 2.0], [3.0, 2.0]])
    assert frobenius_distance(a, b) == pytest.approx(np.sqrt(1.0 + 4.0), abs=1e-15)
    assert frobenius_distance(a, a) == 0.0


def test_frobenius_distance_rejects_shape_mismatch():
    with pytest.raises(ContractViolation):
        frobenius_distance(np.ones((2, 2)), np.ones((2, 3)))


def test_gaussian_matrix_bit_exact_determinism():
    a = gaussian_matrix(7, 5, seed=12345)
    b = gaussian_matrix(7, 5, seed=12345)
    assert np.array_equal(a, b)
    c = gaussian_matrix(7, 5, seed=12346)
    assert not np.array_equal(a, c)


def test_gaussian_matrix_accepts_large_seed():
    a = gaussian_matrix(2, 2, seed=2**63 - 1)
    assert np.all(np.isfinite(a))


def test_gaussian_matrix_moments_are_plausible():
    a = gaussian_matrix(400, 50, seed=9)
    assert abs(a.mean()) < 0.02
    assert abs(a.std() - 1.0) < 0.02


def test_gaussian_matrix_rejects_bad_shape():
    with pytest.raises(ContractViolation):
        gaussian_matrix(0, 3, seed=1)


def test_make_rng_streams_are_independent_and_reproducible():
    a1 = make_rng(7, 0).standard_normal(5)
    a2 = make_rng(7, 0).standard_normal(5)
    b = make_rng(7, 1).standard_normal(5)
    c = make_rng(8, 0).standard_normal(5)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


def test_make_rng_rejects_negative_seed():
    with pytest.raises(ContractViolation):
        make_rng(-1)
