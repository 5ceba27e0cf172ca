"""Finite-difference EIT on the unit square with exact discrete adjoints.

The conductivity lives at cell centres of an ``n x n`` grid. Face
conductivities are harmonic means of the two neighbouring cells. The pure
Neumann problem ``A u = f`` is made nonsingular by adding
``mean(sigma)/n^2 * 1 1^T`` to the stiffness matrix; for zero-sum sources this
returns exactly the mean-zero solution of the singular system and keeps
``A(c sigma) = c A(sigma)``.

Boundary "electrodes" are the ``4(n - 1)`` cells of the outer ring, ordered
counterclockwise from the bottom-left corner. Observations are the potentials
at those cells with the per-pattern mean removed.

Gradients and Hessian-vector products are derived from the discrete system
itself, so they agree with finite differences of :func:`eit_solve` to solver
precision. The harmonic face average contributes an extra curvature term to
the Hessian that has no counterpart in the pointwise continuous formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels as K

SIGMA_MIN = 0.01
SIGMA_MAX = 1.0
DEFAULT_RTOL = 1e-12


class SolverError(RuntimeError):
    """Iterative solve failed to reach the requested residual."""


def boundary_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the boundary ring, counterclockwise from (0, 0)."""
    if n < 2:
        raise ValueError("grid needs n >= 2")
    rows, cols = [], []
    for j in range(0, n - 1):  # bottom, left to right
        rows.append(0)
        cols.append(j)
    for i in range(0, n - 1):  # right, bottom to top
        rows.append(i)
        cols.append(n - 1)
    for j in range(n - 1, 0, -1):  # top, right to left
        rows.append(n - 1)
        cols.append(j)
    for i in range(n - 1, 0, -1):  # left, top to bottom
        rows.append(i)
        cols.append(0)
    return np.array(rows), np.array(cols)


def boundary_angles(n: int) -> np.ndarray:
    rows, cols = boundary_nodes(n)
    h = 1.0 / n
    x = (cols + 0.5) * h - 0.5
    y = (rows + 0.5) * h - 0.5
    return np.arctan2(y, x)


def boundary_restriction_matrix(n: int) -> np.ndarray:
    """Dense ``(B, n*n)`` 0/1 matrix picking boundary-ring cells."""
    rows, cols = boundary_nodes(n)
    R = np.zeros((rows.size, n * n))
    R[np.arange(rows.size), rows * n + cols] = 1.0
    return R


@dataclass(frozen=True, eq=False)
class CurrentPatternSet:
    """``patterns[k, j]``: current injected at boundary node ``j`` by pattern ``k``."""

    n: int
    patterns: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.patterns, dtype=np.float64)
        B = 4 * (self.n - 1)
        if p.ndim != 2 or p.shape[1] != B:
            raise ValueError(f"patterns must have shape (M, {B}), got {p.shape}")
        object.__setattr__(self, "patterns", p)

    @property
    def count(self) -> int:
        return self.patterns.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.patterns.shape[1]


def trig_patterns(n: int, count: int = 8) -> CurrentPatternSet:
    """``cos(k theta), sin(k theta)`` for ``k = 1..count/2``, projected to zero sum.

    On the square ring ``cos(4 theta)`` does not sum to zero, hence the projection.
    """
    if count < 2 or count % 2:
        raise ValueError("pattern count must be a positive even number")
    theta = boundary_angles(n)
    pats = []
    for k in range(1, count // 2 + 1):
        pats.append(np.cos(k * theta))
        pats.append(np.sin(k * theta))
    p = np.array(pats)
    p -= p.mean(axis=1, keepdims=True)
    return CurrentPatternSet(n, p)


def _check_sigma(sigma: np.ndarray, n: int) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (n, n):
        raise ValueError(f"conductivity grid {sigma.shape} does not match patterns for n={n}")
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ValueError("conductivity must be finite and strictly positive")
    return sigma


def _check_compatible(patterns: CurrentPatternSet):
    for k, g in enumerate(patterns.patterns):
        l1 = np.abs(g).sum()
        if abs(g.sum()) > 1e-12 * max(l1, 1e-300):
            raise ValueError(f"pattern {k} injects net current {g.sum():.3e}; Neumann data must sum to zero")


class _System:
    """Assembled face weights for one conductivity; solves any zero-sum source."""

    def __init__(self, sigma: np.ndarray, rtol: float = DEFAULT_RTOL, maxiter: int | None = None):
        n = sigma.shape[0]
        self.n = n
        self.sigma = sigma
        self.sx, self.sy, self.dxa, self.dxb, self.dya, self.dyb = K.face_weights(sigma)
        self.gc = float(sigma.mean()) / (n * n)
        self.diag = K.diagonal(self.sx, self.sy, self.gc)
        self.rtol = rtol
        self.maxiter = maxiter or 20 * n * n
        self.rows, self.cols = boundary_nodes(n)

    def solve(self, f: np.ndarray) -> np.ndarray:
        f = np.ascontiguousarray(f - f.mean())
        x, iters, rel = K.pcg(self.sx, self.sy, self.gc, self.diag, f, self.rtol, self.maxiter)
        if rel > self.rtol:
            raise SolverError(f"CG stopped after {iters} iterations at relative residual {rel:.3e}")
        return x - x.mean()

    def inject(self, boundary_values: np.ndarray) -> np.ndarray:
        f = np.zeros((self.n, self.n))
        np.add.at(f, (self.rows, self.cols), boundary_values)
        return f

    def restrict(self, u: np.ndarray) -> np.ndarray:
        v = u[self.rows, self.cols]
        return v - v.mean()

    def apply_weights(self, wx, wy, u):
        return K.apply_operator(np.ascontiguousarray(wx), np.ascontiguousarray(wy), 0.0, u)

    def face_product(self, u, w, weights=None):
        dxa, dxb, dya, dyb = weights if weights is not None else (self.dxa, self.dxb, self.dya, self.dyb)
        return K.face_product(dxa, dxb, dya, dyb, u, w)


def eit_solve(sigma, patterns: CurrentPatternSet, rtol: float = DEFAULT_RTOL) -> tuple[np.ndarray, np.ndarray]:
    """Boundary voltages ``(M, B)`` and interior potentials ``(M, n, n)``."""
    _check_compatible(patterns)
    sigma = _check_sigma(sigma, patterns.n)
    sys_ = _System(sigma, rtol)
    return _forward(sys_, patterns)


def _forward(sys_: _System, patterns: CurrentPatternSet):
    h = 1.0 / sys_.n
    us, vs = [], []
    for g in patterns.patterns:
        u = sys_.solve(sys_.inject(h * g))
        us.append(u)
        vs.append(sys_.restrict(u))
    return np.array(vs), np.array(us)


def _vjp(sys_: _System, us: np.ndarray, cot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    grad = np.zeros_like(sys_.sigma)
    ws = []
    for u, c in zip(us, cot):
        w = sys_.solve(sys_.inject(c - c.mean()))
        ws.append(w)
        grad -= sys_.face_product(u, w)
    return grad, np.array(ws)


def eit_vjp(sigma, patterns: CurrentPatternSet, cotangent, rtol: float = DEFAULT_RTOL) -> np.ndarray:
    """Pull a cotangent on the voltages ``(M, B)`` back to the conductivity grid."""
    _check_compatible(patterns)
    sigma = _check_sigma(sigma, patterns.n)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != (patterns.count, patterns.n_boundary):
        raise ValueError(f"cotangent shape {cot.shape} does not match observations")
    sys_ = _System(sigma, rtol)
    _, us = _forward(sys_, patterns)
    return _vjp(sys_, us, cot)[0]


def eit_adjoint_gradient(sigma, patterns: CurrentPatternSet, v_obs, rtol: float = DEFAULT_RTOL):
    """Gradient of ``0.5 * sum_k ||V_k - V_obs_k||^2`` and the misfit itself.

    The adjoint flux for pattern ``k`` is the centred residual ``V_k - V_obs_k``;
    the per-cell gradient is ``-sum_k`` of face-weight derivatives times the
    face differences of ``u_k`` and ``w_k``.
    """
    _check_compatible(patterns)
    sigma = _check_sigma(sigma, patterns.n)
    v_obs = np.asarray(v_obs, dtype=np.float64)
    sys_ = _System(sigma, rtol)
    V, us = _forward(sys_, patterns)
    r = V - v_obs
    r = r - r.mean(axis=1, keepdims=True)
    grad, _ = _vjp(sys_, us, r)
    return grad, 0.5 * float(np.sum((V - v_obs) ** 2))


def eit_misfit(sigma, patterns: CurrentPatternSet, v_obs, rtol: float = DEFAULT_RTOL) -> float:
    V, _ = eit_solve(sigma, patterns, rtol)
    return 0.5 * float(np.sum((V - np.asarray(v_obs)) ** 2))


def eit_hvp(sigma, patterns: CurrentPatternSet, v_obs, dsigma, rtol: float = DEFAULT_RTOL) -> np.ndarray:
    """Hessian of the misfit applied to ``dsigma`` via tangent and second adjoint solves."""
    _check_compatible(patterns)
    sigma = _check_sigma(sigma, patterns.n)
    dsigma = np.asarray(dsigma, dtype=np.float64)
    if dsigma.shape != sigma.shape:
        raise ValueError(f"perturbation shape {dsigma.shape} does not match grid {sigma.shape}")
    if not np.any(dsigma):
        return np.zeros_like(sigma)
    sys_ = _System(sigma, rtol)
    V, us = _forward(sys_, patterns)
    v_obs = np.asarray(v_obs, dtype=np.float64)
    r = V - v_obs
    r = r - r.mean(axis=1, keepdims=True)
    _, ws = _vjp(sys_, us, r)

    d = dsigma
    dsx = sys_.dxa * d[:, :-1] + sys_.dxb * d[:, 1:]
    dsy = sys_.dya * d[:-1, :] + sys_.dyb * d[1:, :]
    curv = K.face_weight_curvature(sigma, d)
    out = np.zeros_like(sigma)
    for u, w in zip(us, ws):
        u_hat = sys_.solve(-sys_.apply_weights(dsx, dsy, u))
        w_hat = sys_.solve(sys_.inject(sys_.restrict(u_hat)) - sys_.apply_weights(dsx, dsy, w))
        out -= sys_.face_product(u, w, curv)
        out -= sys_.face_product(u_hat, w)
        out -= sys_.face_product(u, w_hat)
    return out


def harmonic_extension(boundary_values, n: int) -> np.ndarray:
    """Discrete harmonic field with the given values on the boundary ring.

    Interior cells satisfy the uniform 5-point Laplace equation; the boundary
    ring is held at ``boundary_values`` (ordered as :func:`boundary_nodes`).
    """
    g = np.asarray(boundary_values, dtype=np.float64)
    B = 4 * (n - 1)
    if g.shape != (B,):
        raise ValueError(f"expected {B} boundary values, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("boundary values must be finite")
    field = np.zeros((n, n))
    rows, cols = boundary_nodes(n)
    field[rows, cols] = g
    m = n - 2
    if m <= 0:
        return field
    lap1 = sp.diags([-np.ones(m - 1), 2 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1])
    eye = sp.identity(m)
    A = (sp.kron(eye, lap1) + sp.kron(lap1, eye)).tocsc()
    rhs = np.zeros((m, m))
    rhs[0, :] += field[0, 1:-1]
    rhs[-1, :] += field[-1, 1:-1]
    rhs[:, 0] += field[1:-1, 0]
    rhs[:, -1] += field[1:-1, -1]
    interior = spla.spsolve(A, rhs.ravel())
    if not np.all(np.isfinite(interior)):
        raise SolverError("harmonic extension solve produced non-finite values")
    field[1:-1, 1:-1] = interior.reshape(m, m)
    return field
