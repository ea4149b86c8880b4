"""Dense symmetric linear algebra: windowed covariance and eigendecomposition.

The eigensolver is a cyclic Jacobi sweep specialised for the small,
symmetric positive-semidefinite matrices this library works with
(channel counts up to ~64). A JIT-compiled kernel keeps the per-window
cost low enough for streaming use; if numba is unavailable the same
kernel runs as plain Python.
"""

from __future__ import annotations

import numpy as np

from .validation import ConvergenceError, ParameterError

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
SYMMETRY_ATOL = 1e-8

__all__ = ["window_covariance", "sym_eig"]


def window_covariance(window: np.ndarray, s: int | None = None) -> np.ndarray:
    """Mean-centered covariance of the trailing ``s`` samples of a window.

    Parameters
    ----------
    window : ndarray, shape (C, W)
    s : int or None
        Number of trailing columns to use. ``None`` uses the full window.

    Returns
    -------
    ndarray, shape (C, C)
        ``X_s @ X_s.T / (s - 1)`` with ``X_s`` the per-channel
        mean-centered segment. Symmetric and positive semidefinite.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ParameterError(f"window must be (C, W), got {window.shape}")
    w = window.shape[1]
    if s is None:
        s = w
    if s < 2:
        raise ParameterError(f"covariance segment needs s >= 2, got {s}")
    if s > w:
        raise ParameterError(f"segment s={s} exceeds window length {w}")
    seg = window[:, w - s:]
    centered = seg - seg.mean(axis=1, keepdims=True)
    return centered @ centered.T / (s - 1)


@njit(cache=True)
def _jacobi_kernel(a, v, tol, max_sweeps):  # pragma: no cover - jitted
    n = a.shape[0]
    sweeps = 0
    while sweeps < max_sweeps:
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        off = np.sqrt(2.0 * off)
        if off < tol:
            return sweeps, off
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for i in range(n):
                    if i != p and i != q:
                        aip = a[i, p]
                        aiq = a[i, q]
                        a[i, p] = aip * c - aiq * s
                        a[p, i] = a[i, p]
                        a[i, q] = aiq * c + aip * s
                        a[q, i] = a[i, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for i in range(n):
                    vip = v[i, p]
                    viq = v[i, q]
                    v[i, p] = vip * c - viq * s
                    v[i, q] = viq * c + vip * s
        sweeps += 1
    off = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            off += a[i, j] * a[i, j]
    return sweeps, np.sqrt(2.0 * off)


def sym_eig(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are applied in a fixed row-major order of the upper
    triangle; the result is deterministic for a given input. Convergence
    is declared when the off-diagonal Frobenius norm drops below
    ``1e-12`` relative to ``max(1, ||A||_F)``.

    Returns
    -------
    d : ndarray, shape (C,)
        Eigenvalues sorted descending.
    v : ndarray, shape (C, C)
        Orthonormal eigenvectors; column ``j`` pairs with ``d[j]``. Each
        column is scaled so its largest-magnitude entry is positive.

    Raises
    ------
    ConvergenceError
        If the off-diagonal norm is still above tolerance after the
        maximum number of sweeps.
    """
    a = np.asarray(cov, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterError(f"matrix must be square, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > SYMMETRY_ATOL * scale:
        raise ParameterError("matrix is not symmetric")
    n = a.shape[0]
    if n == 1:
        return a[0].copy(), np.ones((1, 1))
    work = np.ascontiguousarray((a + a.T) / 2.0)
    v = np.eye(n)
    tol = JACOBI_TOL * max(1.0, float(np.linalg.norm(work)))
    sweeps, off = _jacobi_kernel(work, v, tol, JACOBI_MAX_SWEEPS)
    if off >= tol:
        raise ConvergenceError(
            f"Jacobi eigensolver did not converge after {sweeps} sweeps "
            f"(off-diagonal norm {off:.3e}, tolerance {tol:.3e})",
            sweeps=sweeps,
        )
    d = np.diag(work).copy()
    order = np.argsort(-d, kind="stable")
    d = d[order]
    v = v[:, order]
    # sign convention: largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(v), axis=0)
    flips = v[idx, np.arange(n)] < 0
    v[:, flips] *= -1.0
    return d, v
