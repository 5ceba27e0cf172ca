"""Grid kernels for the variable-coefficient 5-point operator.

Each kernel has a loop version compiled by numba and a vectorized numpy
version; :mod:`dilo._jit` picks one at import time. Both are kept importable so
the benchmark can time them side by side.

Layout: ``sigma[i, j]`` with ``i`` the row (y) and ``j`` the column (x).
x-faces join ``(i, j)`` and ``(i, j + 1)`` and have shape ``(n, n - 1)``;
y-faces join ``(i, j)`` and ``(i + 1, j)`` and have shape ``(n - 1, n)``.
"""

from __future__ import annotations

import numpy as np

from .._jit import njit, pick


def face_weights(sigma: np.ndarray):
    """Harmonic-mean face conductivities and their first derivatives.

    Returns ``(sx, sy, dxa, dxb, dya, dyb)`` where ``dxa`` is the derivative of
    an x-face weight with respect to its left cell and ``dxb`` to its right.
    """
    a, b = sigma[:, :-1], sigma[:, 1:]
    s = a + b
    sx = 2.0 * a * b / s
    dxa = 2.0 * b * b / (s * s)
    dxb = 2.0 * a * a / (s * s)
    a, b = sigma[:-1, :], sigma[1:, :]
    s = a + b
    sy = 2.0 * a * b / s
    dya = 2.0 * b * b / (s * s)
    dyb = 2.0 * a * a / (s * s)
    return sx, sy, dxa, dxb, dya, dyb


def face_weight_curvature(sigma: np.ndarray, dsigma: np.ndarray):
    """Directional derivative of the face-weight derivatives along ``dsigma``."""
    a, b = sigma[:, :-1], sigma[:, 1:]
    da, db = dsigma[:, :-1], dsigma[:, 1:]
    s3 = (a + b) ** 3
    exa = 4.0 * b * (a * db - b * da) / s3
    exb = 4.0 * a * (b * da - a * db) / s3
    a, b = sigma[:-1, :], sigma[1:, :]
    da, db = dsigma[:-1, :], dsigma[1:, :]
    s3 = (a + b) ** 3
    eya = 4.0 * b * (a * db - b * da) / s3
    eyb = 4.0 * a * (b * da - a * db) / s3
    return exa, exb, eya, eyb


# --- operator application ---------------------------------------------------


@njit
def _apply_jit(sx, sy, gc, u):
    n = u.shape[0]
    out = np.empty_like(u)
    tot = 0.0
    for i in range(n):
        for j in range(n):
            tot += u[i, j]
    for i in range(n):
        for j in range(n):
            c = u[i, j]
            acc = gc * tot
            if j > 0:
                acc += sx[i, j - 1] * (c - u[i, j - 1])
            if j < n - 1:
                acc += sx[i, j] * (c - u[i, j + 1])
            if i > 0:
                acc += sy[i - 1, j] * (c - u[i - 1, j])
            if i < n - 1:
                acc += sy[i, j] * (c - u[i + 1, j])
            out[i, j] = acc
    return out


def _apply_np(sx, sy, gc, u):
    out = np.full_like(u, gc * u.sum())
    fx = sx * (u[:, :-1] - u[:, 1:])
    fy = sy * (u[:-1, :] - u[1:, :])
    out[:, :-1] += fx
    out[:, 1:] -= fx
    out[:-1, :] += fy
    out[1:, :] -= fy
    return out


apply_operator = pick(_apply_jit, _apply_np)


def diagonal(sx, sy, gc):
    d = np.full((sx.shape[0], sx.shape[0]), gc)
    d[:, :-1] += sx
    d[:, 1:] += sx
    d[:-1, :] += sy
    d[1:, :] += sy
    return d


# --- preconditioned conjugate gradients ------------------------------------


@njit
def _pcg_jit(sx, sy, gc, diag, f, rtol, maxiter):
    n = f.shape[0]
    x = np.zeros_like(f)
    r = f.copy()
    bnorm = np.sqrt(np.sum(f * f))
    if bnorm == 0.0:
        return x, 0, 0.0
    z = r / diag
    p = z.copy()
    rz = np.sum(r * z)
    rel = 1.0
    for it in range(maxiter):
        ap = _apply_jit(sx, sy, gc, p)
        alpha = rz / np.sum(p * ap)
        for i in range(n):
            for j in range(n):
                x[i, j] += alpha * p[i, j]
                r[i, j] -= alpha * ap[i, j]
        rel = np.sqrt(np.sum(r * r)) / bnorm
        if rel <= rtol:
            return x, it + 1, rel
        z = r / diag
        rz_new = np.sum(r * z)
        beta = rz_new / rz
        rz = rz_new
        for i in range(n):
            for j in range(n):
                p[i, j] = z[i, j] + beta * p[i, j]
    return x, maxiter, rel


def _pcg_np(sx, sy, gc, diag, f, rtol, maxiter):
    x = np.zeros_like(f)
    r = f.copy()
    bnorm = np.sqrt(np.sum(f * f))
    if bnorm == 0.0:
        return x, 0, 0.0
    z = r / diag
    p = z.copy()
    rz = np.sum(r * z)
    rel = 1.0
    for it in range(maxiter):
        ap = _apply_np(sx, sy, gc, p)
        alpha = rz / np.sum(p * ap)
        x += alpha * p
        r -= alpha * ap
        rel = np.sqrt(np.sum(r * r)) / bnorm
        if rel <= rtol:
            return x, it + 1, rel
        z = r / diag
        rz_new = np.sum(r * z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, rel


pcg = pick(_pcg_jit, _pcg_np)


# --- per-cell accumulation of face products ---------------------------------


@njit
def _face_product_jit(dxa, dxb, dya, dyb, u, w):
    n = u.shape[0]
    out = np.zeros_like(u)
    for i in range(n):
        for j in range(n - 1):
            p = (u[i, j] - u[i, j + 1]) * (w[i, j] - w[i, j + 1])
            out[i, j] += dxa[i, j] * p
            out[i, j + 1] += dxb[i, j] * p
    for i in range(n - 1):
        for j in range(n):
            p = (u[i, j] - u[i + 1, j]) * (w[i, j] - w[i + 1, j])
            out[i, j] += dya[i, j] * p
            out[i + 1, j] += dyb[i, j] * p
    return out


def _face_product_np(dxa, dxb, dya, dyb, u, w):
    out = np.zeros_like(u)
    px = (u[:, :-1] - u[:, 1:]) * (w[:, :-1] - w[:, 1:])
    py = (u[:-1, :] - u[1:, :]) * (w[:-1, :] - w[1:, :])
    out[:, :-1] += dxa * px
    out[:, 1:] += dxb * px
    out[:-1, :] += dya * py
    out[1:, :] += dyb * py
    return out


face_product = pick(_face_product_jit, _face_product_np)

JIT_KERNELS = {"apply": _apply_jit, "pcg": _pcg_jit, "face_product": _face_product_jit}
NUMPY_KERNELS = {"apply": _apply_np, "pcg": _pcg_np, "face_product": _face_product_np}
