"""Small symmetric eigenproblems and matrix square roots (cyclic Jacobi)."""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import NotPositiveDefinite

EIG_FLOOR = 1e-12


@njit(cache=True)
def jacobi_eigh(a, max_sweeps=60):
    """Eigenvalues and orthonormal eigenvectors (columns) of a symmetric matrix."""
    n = a.shape[0]
    m = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        scale = 0.0
        for i in range(n):
            scale += m[i, i] * m[i, i]
            for j in range(i + 1, n):
                off += m[i, j] * m[i, j]
        if off <= 1e-32 * scale or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    mkp = m[k, p]
                    mkq = m[k, q]
                    m[k, p] = c * mkp - s * mkq
                    m[k, q] = s * mkp + c * mkq
                for k in range(n):
                    mpk = m[p, k]
                    mqk = m[q, k]
                    m[p, k] = c * mpk - s * mqk
                    m[q, k] = s * mpk + c * mqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = m[i, i]
    return w, v


@njit(cache=True)
def sqrtm_spd_kernel(a, out):
    """Write the symmetric square root of ``a`` into ``out``.

    Returns False (leaving ``out`` untouched) when an eigenvalue is below the floor.
    """
    w, v = jacobi_eigh(a)
    n = a.shape[0]
    for i in range(n):
        if w[i] < EIG_FLOOR:
            return False
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += v[i, k] * np.sqrt(w[k]) * v[j, k]
            out[i, j] = acc
    for i in range(n):
        for j in range(i + 1, n):
            avg = 0.5 * (out[i, j] + out[j, i])
            out[i, j] = avg
            out[j, i] = avg
    return True


def symmetric_eigh(a) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix is not symmetric")
    return jacobi_eigh(0.5 * (a + a.T))


def sqrtm_spd(a) -> np.ndarray:
    """Symmetric positive-definite square root; raises below the eigenvalue floor."""
    a = np.asarray(a, dtype=float)
    symmetric_eigh(a)
    out = np.empty_like(a)
    if not sqrtm_spd_kernel(0.5 * (a + a.T), out):
        w, _ = symmetric_eigh(a)
        raise NotPositiveDefinite(f"smallest eigenvalue {w.min():.3e} below floor {EIG_FLOOR}")
    return out
