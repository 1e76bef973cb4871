"""Complex dense linear algebra used throughout the package.

Matrices and vectors are plain ``numpy`` arrays of dtype ``complex128``.
Decompositions return factors under a deterministic phase convention: the
largest-magnitude entry of every right singular vector (or eigenvector) is
real and positive.
"""

import numpy as np

from risvi.errors import ContractViolation, InvalidDimensionError, NumericalFailure

JITTER = 1e-9
HERMITIAN_RTOL = 1e-10


def as_matrix(a, name="A"):
    """Return ``a`` as a finite 2-D complex array."""
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2:
        raise InvalidDimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} has non-finite entries")
    return a


def dft_matrix(n):
    """Unnormalized forward DFT matrix ``F[j, k] = exp(-2j*pi*j*k/n)``.

    ``F @ F.conj().T == n * I``, so the inverse is ``F.conj().T / n``.
    """
    n = int(n)
    if n < 1:
        raise InvalidDimensionError(f"DFT size must be >= 1, got {n}")
    k = np.arange(n)
    # exact integer reduction keeps large-index entries accurate
    return np.exp(-2j * np.pi * (np.outer(k, k) % n) / n)


def _fix_phase(cols):
    """Rotate each column so its largest-magnitude entry is real positive.

    Returns the rotated columns and the unit phasors that were applied.
    """
    idx = np.argmax(np.abs(cols), axis=0)
    pivot = cols[idx, np.arange(cols.shape[1])]
    mag = np.abs(pivot)
    rot = np.ones(cols.shape[1], dtype=complex)
    nz = mag > 0
    rot[nz] = np.conj(pivot[nz]) / mag[nz]
    return cols * rot, rot


def svd(a):
    """Thin SVD ``A = U @ diag(s) @ V^H`` with descending ``s``.

    The phase of each right singular vector is fixed by the package
    convention and the matching left vector is rotated with it, so the
    product is unchanged.

    Returns
    -------
    u : ndarray, shape (m, r)
    s : ndarray, shape (r,)
    v : ndarray, shape (n, r)
        Right singular vectors as columns (not ``V^H``).
    """
    a = as_matrix(a)
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge for shape {a.shape}: {exc}") from exc
    v, rot = _fix_phase(vh.conj().T)
    return u * rot, s, v


def eigh(a):
    """Hermitian eigendecomposition ``A = P @ diag(lam) @ P^H``, ``lam`` descending."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise InvalidDimensionError(f"eigh needs a square matrix, got {a.shape}")
    scale = max(np.linalg.norm(a), 1e-300)
    if np.linalg.norm(a - a.conj().T) > HERMITIAN_RTOL * scale:
        raise ContractViolation("eigh input is not Hermitian")
    lam, p = np.linalg.eigh(0.5 * (a + a.conj().T))
    lam, p = lam[::-1], p[:, ::-1]
    p, _ = _fix_phase(p)
    return lam, p


def top_eigvec(a):
    """Unit-norm eigenvector of the largest eigenvalue of a Hermitian matrix."""
    return eigh(a)[1][:, 0]


def khatri_rao(a, b):
    """Column-wise Kronecker product; column ``j`` is ``kron(a[:, j], b[:, j])``."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidDimensionError(
            f"khatri_rao needs equal column counts, got {a.shape} and {b.shape}"
        )
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


def _cholesky(a):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[-1])
    try:
        return np.linalg.cholesky(a + JITTER * eye)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("matrix is not positive definite after jitter") from exc


def chol_logdet_solve(a, b):
    """Solve ``A X = B`` and return ``log|A|`` from one Cholesky factorization.

    ``a`` may carry leading batch dimensions; each matrix in the batch gets
    the one-shot ``1e-9 * I`` jitter independently if its factorization fails.

    Returns
    -------
    x : ndarray
        Solution with the shape of ``b``.
    logdet : float or ndarray
        Natural log-determinant of each matrix in ``a``.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape[-1] != a.shape[-2] or b.shape[-2] != a.shape[-1]:
        raise InvalidDimensionError(f"incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 2:
        chol = _cholesky(a)
    else:
        try:
            chol = np.linalg.cholesky(a)
        except np.linalg.LinAlgError:
            flat = a.reshape(-1, *a.shape[-2:])
            factors = []
            for i, m in enumerate(flat):
                try:
                    factors.append(_cholesky(m))
                except NumericalFailure as exc:
                    idx = np.unravel_index(i, a.shape[:-2])
                    raise NumericalFailure(f"{exc} (batch item {idx})", index=idx) from exc
            chol = np.stack(factors).reshape(a.shape)
    z = np.linalg.solve(chol, b)
    x = np.linalg.solve(np.swapaxes(chol, -1, -2).conj(), z)
    logdet = 2.0 * np.sum(np.log(np.real(np.diagonal(chol, axis1=-2, axis2=-1))), axis=-1)
    return x, logdet
