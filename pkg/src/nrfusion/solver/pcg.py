"""Jacobi-preconditioned conjugate gradients for the sparse SPD position systems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    residual: float   # |b - Ax| / |b|
    converged: bool


def pcg_solve(A, b, x0=None, tol=1e-4, max_iters=50):
    """Solve ``A x = b`` for symmetric positive (semi-)definite ``A``.

    Stops when the relative residual drops below ``tol``. Zero diagonal
    entries are preconditioned with 1.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        bnorm = 1.0
    diag = np.asarray(A.diagonal(), dtype=float) if hasattr(A, "diagonal") else np.diag(A).astype(float)
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    r = b - A @ x
    res = np.linalg.norm(r) / bnorm
    if res <= tol:
        return PCGResult(x, 0, float(res), True)
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iters + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            # direction of zero curvature: nothing further to gain
            return PCGResult(x, it - 1, float(res), False)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            return PCGResult(x, it, float(res), True)
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PCGResult(x, max_iters, float(res), False)
