"""Dense linear algebra helpers: pseudoinverse, eigenvalues, least squares."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

PINV_RTOL = 1e-10

__all__ = ["PINV_RTOL", "pinv", "eigvals", "penrose_residuals"]


def pinv(m, tol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``tol * sigma_max`` are treated as zero, so the
    zero matrix maps to the zero matrix of transposed shape.
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.size == 0:
        return np.zeros(m.shape[::-1])
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(m.shape[::-1])
    keep = s > tol * s[0]
    s_inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (vt.T * s_inv) @ u.T


def penrose_residuals(a, a_pinv) -> tuple[float, float, float, float]:
    """Max-abs residuals of the four Penrose identities."""
    a = np.asarray(a, dtype=np.float64)
    ap = np.asarray(a_pinv, dtype=np.float64)
    aap = a @ ap
    apa = ap @ a
    return (
        float(np.max(np.abs(aap @ a - a), initial=0.0)),
        float(np.max(np.abs(apa @ ap - ap), initial=0.0)),
        float(np.max(np.abs(aap - aap.T), initial=0.0)),
        float(np.max(np.abs(apa - apa.T), initial=0.0)),
    )


def eigvals(m) -> np.ndarray:
    """All eigenvalues (with multiplicity) of a square matrix, as complex numbers.

    Backed by LAPACK's Hessenberg QR iteration.
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"eigvals needs a square matrix, got shape {m.shape}")
    return np.linalg.eigvals(m).astype(np.complex128)
