import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import crandn
from risvi.errors import ContractViolation, InvalidDimensionError, NumericalFailure
from risvi.numerics import chol_logdet_solve, dft_matrix, eigh, khatri_rao, svd


def test_dft_small_cases():
    assert np.array_equal(dft_matrix(1), [[1.0]])
    np.testing.assert_allclose(dft_matrix(2), [[1, 1], [1, -1]], atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 4, 8, 16, 64])
def test_dft_scaled_unitary(n):
    F = dft_matrix(n)
    assert np.linalg.norm(F @ F.conj().T - n * np.eye(n)) < 1e-10


def test_dft_matches_fft():
    # numpy's FFT uses the same sign convention, so F x == fft(x)
    x = np.arange(8) + 1j
    np.testing.assert_allclose(dft_matrix(8) @ x, np.fft.fft(x), atol=1e-12)


def test_dft_rejects_zero():
    with pytest.raises(InvalidDimensionError):
        dft_matrix(0)


def test_svd_examples():
    _, s, _ = svd(np.eye(2))
    np.testing.assert_allclose(s, [1, 1])
    _, s, V = svd(np.array([[2.0, 0.0], [0.0, 0.0]]))
    np.testing.assert_allclose(s, [2, 0])
    np.testing.assert_allclose(V[:, 0], [1, 0], atol=1e-15)


def _phase_ok(cols):
    idx = np.argmax(np.abs(cols), axis=0)
    lead = cols[idx, np.arange(cols.shape[1])]
    return np.allclose(lead.imag, 0, atol=1e-12) and np.all(lead.real > 0)


@pytest.mark.parametrize("shape", [(4, 6), (6, 4), (16, 64), (3, 3)])
def test_svd_reconstruction_and_convention(rng, shape):
    for _ in range(25):
        A = crandn(rng, *shape)
        U, s, V = svd(A)
        assert np.linalg.norm(A - (U * s) @ V.conj().T) / np.linalg.norm(A) < 1e-10
        assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
        assert _phase_ok(V)
        U2, s2, V2 = svd(A)
        assert np.array_equal(U, U2) and np.array_equal(s, s2) and np.array_equal(V, V2)


def test_eigh_examples(rng):
    lam, _ = eigh(np.eye(3))
    np.testing.assert_allclose(lam, [1, 1, 1])
    lam, P = eigh(np.diag([1.0, 3.0]))
    np.testing.assert_allclose(lam, [3, 1])
    np.testing.assert_allclose(np.abs(P), np.array([[0, 1], [1, 0]]), atol=1e-15)
    a = crandn(rng, 6)
    lam, _ = eigh(np.outer(a, a.conj()))
    assert abs(lam[0] - np.vdot(a, a).real) < 1e-10
    assert np.all(np.abs(lam[1:]) < 1e-10)


def test_eigh_reconstruction(rng):
    for n in (2, 5, 16):
        X = crandn(rng, n, n)
        A = X @ X.conj().T
        lam, P = eigh(A)
        assert np.linalg.norm(A - (P * lam) @ P.conj().T) / np.linalg.norm(A) < 1e-10
        assert np.all(np.diff(lam) <= 1e-12)
        assert _phase_ok(P)


def test_eigh_rejects_non_hermitian(rng):
    with pytest.raises(ContractViolation):
        eigh(crandn(rng, 3, 3))


def test_khatri_rao_examples(rng):
    a, b = crandn(rng, 3, 1), crandn(rng, 2, 1)
    np.testing.assert_allclose(khatri_rao(a, b), np.kron(a, b))
    K = khatri_rao(np.eye(2), np.eye(2))
    np.testing.assert_array_equal(K, np.array([[1, 0], [0, 0], [0, 0], [0, 1]]))
    with pytest.raises(InvalidDimensionError):
        khatri_rao(np.eye(2), np.eye(3))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_vectorization_identity(m, n, p, seed):
    rng = np.random.default_rng(seed)
    A, x, C = crandn(rng, m, n), crandn(rng, n), crandn(rng, n, p)
    lhs = (A @ np.diag(x) @ C).reshape(-1, order="F")
    assert np.max(np.abs(lhs - khatri_rao(C.T, A) @ x)) < 1e-12 * max(1.0, np.abs(lhs).max())


def test_chol_examples(rng):
    B = crandn(rng, 3, 2)
    X, ld = chol_logdet_solve(np.eye(3), B)
    np.testing.assert_allclose(X, B)
    assert ld == 0.0
    _, ld = chol_logdet_solve(2 * np.eye(3), B)
    assert abs(ld - 3 * np.log(2)) < 1e-14


def test_chol_random_pd(rng):
    L = crandn(rng, 5, 5)
    A = L @ L.conj().T + np.eye(5)
    B = crandn(rng, 5, 3)
    X, ld = chol_logdet_solve(A, B)
    np.testing.assert_allclose(A @ X, B, atol=1e-10)
    assert abs(ld - np.linalg.slogdet(A)[1]) < 1e-10


def test_chol_batched_matches_loop(rng):
    mats = []
    for _ in range(4):
        L = crandn(rng, 4, 4)
        mats.append(L @ L.conj().T + np.eye(4))
    A = np.stack(mats)
    X, ld = chol_logdet_solve(A, np.broadcast_to(np.eye(4), A.shape))
    for i in range(4):
        Xi, ldi = chol_logdet_solve(A[i], np.eye(4))
        np.testing.assert_allclose(X[i], Xi, atol=1e-12)
        assert abs(ld[i] - ldi) < 1e-12


def test_chol_jitter_and_failure():
    # singular PSD matrix: the one-shot jitter makes it factorizable
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    _, ld = chol_logdet_solve(A, np.eye(2))
    assert np.isfinite(ld)
    with pytest.raises(NumericalFailure):
        chol_logdet_solve(-np.eye(2), np.eye(2))


def test_chol_batched_failure_reports_item():
    A = np.stack([np.eye(2), -np.eye(2)])
    with pytest.raises(NumericalFailure) as info:
        chol_logdet_solve(A, np.broadcast_to(np.eye(2), A.shape))
    assert info.value.index == (1,)
