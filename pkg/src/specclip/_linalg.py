"""Small dense kernels: sign-normalized QR and one-sided cyclic Jacobi SVD."""

from __future__ import annotations

import numpy as np
from numba import njit


def householder_qr(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of an ``(n, k)`` matrix, ``n >= k`` (LAPACK Householder).

    Columns of ``Q`` are sign-flipped so that ``diag(R) >= 0``.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] > A.shape[0]:
        raise ValueError(f"thin QR needs n >= k, got {A.shape}")
    Q, R = np.linalg.qr(A, mode="reduced")
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs, R * signs[:, None]


@njit(cache=True)
def _hestenes_inplace(C, max_sweeps):
    # rows of C are the columns of the matrix being orthogonalized
    n, m = C.shape
    eps = 2.220446049250313e-16
    fro2 = 0.0
    for p in range(n):
        for r in range(m):
            fro2 += C[p, r] * C[p, r]
    # columns below this squared norm are rounding noise
    floor = eps * eps * fro2
    # pairs closer to orthogonal than this are left alone; the bare eps
    # threshold can cycle forever on exactly repeated singular values
    tol = np.sqrt(m) * eps
    for sweep in range(max_sweeps):
        rotations = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for r in range(m):
                    alpha += C[p, r] * C[p, r]
                    beta += C[q, r] * C[q, r]
                    gamma += C[p, r] * C[q, r]
                if alpha <= floor or beta <= floor or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotations += 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for r in range(m):
                    cp = C[p, r]
                    cq = C[q, r]
                    C[p, r] = c * cp - s * cq
                    C[q, r] = s * cp + c * cq
        if rotations == 0:
            return sweep
    return -1


def jacobi_singular_values(M: np.ndarray, max_sweeps: int = 60) -> tuple[np.ndarray, int]:
    """All singular values of ``M`` (descending) by one-sided cyclic Jacobi.

    Each rotation annihilates one off-diagonal entry of ``M^T M`` without
    forming it, so tiny singular values keep absolute accuracy near
    ``eps * sigma_1`` instead of ``sqrt(eps) * sigma_1``. The matrix (or its
    transpose, if wide) is first reduced to its square ``R`` factor; a wide
    input gets ``n - m`` trailing zeros. Returns
    ``(sigmas, sweeps used)``.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    m, n = M.shape
    A = M if m >= n else M.T
    if A.shape[0] > A.shape[1]:
        _, A = householder_qr(A)
    C = np.array(A.T, order="C")
    sweeps = _hestenes_inplace(C, max_sweeps)
    if sweeps < 0:
        raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps")
    sig = np.sort(np.sqrt(np.einsum("ij,ij->i", C, C)))[::-1]
    return np.concatenate([sig, np.zeros(n - sig.size)]), sweeps
