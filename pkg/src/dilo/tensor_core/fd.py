"""Finite-difference oracles and small autodiff conveniences."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .graph import Graph, Tensor


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {tuple(int(j) for j in np.unravel_index(i, x.shape))}")
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(x.shape)


def hvp_finite_difference(gradf: Callable[[np.ndarray], np.ndarray], x, v, h: float = 1e-5) -> np.ndarray:
    """Hessian-vector product as a central difference of the gradient along ``v``."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if x.shape != v.shape:
        raise ValueError(f"hvp: shape mismatch {x.shape} vs {v.shape}")
    if h <= 0:
        raise ValueError("step size h must be positive")
    gp = np.asarray(gradf(x + h * v), dtype=np.float64)
    gm = np.asarray(gradf(x - h * v), dtype=np.float64)
    return (gp - gm) / (2.0 * h)


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, shape ``out.shape + x.shape``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = np.asarray(f(x), dtype=np.float64)
        flat[i] = old - h
        fm = np.asarray(f(x), dtype=np.float64)
        flat[i] = old
        cols.append((fp - fm) / (2.0 * h))
    jac = np.stack(cols, axis=-1)
    return jac.reshape(cols[0].shape + x.shape)


def value_and_grad(fn: Callable[[Tensor], Tensor], x) -> tuple[float, np.ndarray]:
    with Graph() as g:
        xt = g.leaf(np.array(x, dtype=np.float64))
        out = fn(xt)
        if out.node_id is None:
            return out.item(), np.zeros_like(xt.data)
        grads = g.backward(out)
    return out.item(), grads[xt.node_id]


def jacobian(fn: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Reverse-mode Jacobian, one backward sweep per output entry."""
    with Graph() as g:
        xt = g.leaf(np.array(x, dtype=np.float64))
        out = fn(xt)
        flat = out.reshape(-1)
        rows = []
        for i in range(flat.shape[0]):
            grads = g.backward(flat[i])
            rows.append(grads[xt.node_id])
    return np.stack(rows).reshape(out.shape + xt.shape)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
