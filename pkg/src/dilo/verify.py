"""Oracle-only checks that need no trained artifacts.

Each check returns a :class:`Check` with the measured quantity and its bound,
so the same functions back the ``verify`` subcommand and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffusion import (
    coefficients_cd,
    ddim_step,
    forward_noise,
    make_schedule,
    sample_deterministic,
    tweedie,
)
from .physics.data import blob_field
from .physics.eit import (
    boundary_nodes,
    eit_adjoint_gradient,
    eit_hvp,
    eit_misfit,
    eit_solve,
    harmonic_extension,
    trig_patterns,
)
from .physics.navier_stokes import Grid, ns_forward
from .tensor_core import Graph, finite_difference_gradient, relative_error


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    bound: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.measured:.3e} (bound {self.bound:.1e})"


def _le(name, measured, bound) -> Check:
    return Check(name, bool(measured <= bound), float(measured), float(bound))


# --- autodiff -----------------------------------------------------------------------


def check_autodiff(seed: int = 0, tol: float = 1e-6) -> Check:
    """Reverse-mode gradient of a composite of every elementwise op against central differences."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((5, 4))
    x0 = rng.uniform(0.5, 1.5, size=5)

    def f(x):
        h = (x @ W).tanh() * (x @ W).sin() + (x.square() + 1.0).sqrt()[:4].cos()
        return (h - (x @ W).relu()).mean() + x.sum() * 0.1

    with Graph() as g:
        x = g.leaf(x0)
        grad = g.grad(f(x), [x])[0]
    fd = finite_difference_gradient(lambda v: f(Graph().leaf(v)).item(), x0, 1e-6)
    return _le("autodiff vs finite differences", relative_error(grad, fd), tol)


# --- physics ------------------------------------------------------------------------


def _rand_sigma(rng, n):
    return blob_field(rng, n)


def check_eit_adjoint(instances: int = 20, n: int = 16, tol: float = 1e-4, seed: int = 0) -> Check:
    """Adjoint gradient against directional central differences along random directions."""
    pat = trig_patterns(n)
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        sigma, target = _rand_sigma(rng, n), _rand_sigma(rng, n)
        v_obs = eit_solve(target, pat)[0]
        grad, _ = eit_adjoint_gradient(sigma, pat, v_obs)
        d = rng.standard_normal((n, n))
        h = 1e-5
        fd = (eit_misfit(sigma + h * d, pat, v_obs) - eit_misfit(sigma - h * d, pat, v_obs)) / (2 * h)
        an = float(np.sum(grad * d))
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-300))
    return _le(f"EIT adjoint gradient, {instances} instances", worst, tol)


def check_eit_hvp(n: int = 16, tol: float = 1e-3, sym_tol: float = 1e-4, seed: int = 0) -> list[Check]:
    pat = trig_patterns(n)
    rng = np.random.default_rng(seed)
    sigma, target = _rand_sigma(rng, n), _rand_sigma(rng, n)
    v_obs = eit_solve(target, pat)[0]
    d1, d2 = rng.standard_normal((2, n, n))
    h = 1e-5
    hv = eit_hvp(sigma, pat, v_obs, d1)
    fd = (eit_adjoint_gradient(sigma + h * d1, pat, v_obs)[0] - eit_adjoint_gradient(sigma - h * d1, pat, v_obs)[0]) / (
        2 * h
    )
    a = float(np.sum(d2 * hv))
    b = float(np.sum(d1 * eit_hvp(sigma, pat, v_obs, d2)))
    return [
        _le("EIT Hessian-vector product vs FD of gradient", relative_error(hv, fd), tol),
        _le("EIT Hessian symmetry", abs(a - b) / max(abs(a), abs(b)), sym_tol),
    ]


def check_eit_homogeneity(n: int = 16, tol: float = 1e-10, seed: int = 0) -> Check:
    """``V(c sigma) = V(sigma) / c``."""
    pat = trig_patterns(n)
    rng = np.random.default_rng(seed)
    sigma = _rand_sigma(rng, n)
    worst = 0.0
    for c in (0.5, 2.0, 7.0):
        V1 = eit_solve(sigma, pat)[0]
        Vc = eit_solve(c * sigma, pat)[0]
        worst = max(worst, relative_error(c * Vc, V1))
    return _le("EIT homogeneity", worst, tol)


def check_ns_decay(n: int = 32, tol: float = 1e-8) -> Check:
    """Unforced, advection-free single Fourier mode decays as ``exp(-nu |k|^2 t)``."""
    X, Y = Grid(n).coords
    nu, T = 0.05, 1.0
    w0 = np.sin(2 * X + 3 * Y)
    w = ns_forward(w0, nu=nu, T=T, dt=0.01, forcing=None, advection=False)
    exact = w0 * np.exp(-nu * 13 * T)
    return _le("Navier-Stokes viscous decay", float(np.max(np.abs(w - exact))), tol)


def check_ns_mean(n: int = 32, tol: float = 1e-12, seed: int = 0) -> Check:
    from .physics.data import grf_field

    w0 = grf_field(np.random.default_rng(seed), n) + 0.3
    w = ns_forward(w0, T=0.5, dt=0.01)
    return _le("Navier-Stokes mean vorticity conservation", abs(w.mean() - w0.mean()), tol)


def check_max_principle(n: int = 16, count: int = 100, seed: int = 0) -> Check:
    """Harmonic extensions of random boundary data stay inside the boundary range."""
    rows, cols = boundary_nodes(n)
    worst = -np.inf
    for i in range(count):
        g = np.random.default_rng([seed, i]).standard_normal(4 * (n - 1))
        u = harmonic_extension(g, n)
        inner = u[1:-1, 1:-1]
        worst = max(worst, inner.max() - g.max(), g.min() - inner.min())
    return Check(f"harmonic extension maximum principle, {count} boundaries", bool(worst <= 1e-12), float(worst), 1e-12)


# --- diffusion ----------------------------------------------------------------------


class _ToyScore:
    """Fixed smooth map standing in for a trained noise predictor."""

    def __init__(self, dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.A = rng.standard_normal((dim, dim)) / np.sqrt(dim)

    def score(self, z, t):
        return (z @ self.A).tanh() * 0.5 if hasattr(z, "tanh") else np.tanh(z @ self.A) * 0.5


def check_ddim_forms(tol: float = 1e-12, seed: int = 0) -> Check:
    """Tweedie-then-renoise form equals the collapsed ``c z + d eps`` form at every step."""
    sched = make_schedule(n_substeps=50)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, tp in sched.pairs():
        z, eps = rng.standard_normal((2, 8))
        a = ddim_step(z, eps, t, tp, sched)
        c, d = coefficients_cd(t, tp, sched)
        worst = max(worst, float(np.max(np.abs(a - (c * z + d * eps)))))
    return _le("DDIM two-form equivalence", worst, tol)


def check_tweedie_roundtrip(tol: float = 1e-10, seed: int = 0) -> Check:
    sched = make_schedule()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in (1, 10, 250, 500, 999, 1000):
        z0, eps = rng.standard_normal((2, 16))
        z_t = forward_noise(z0, t, eps, sched)
        worst = max(worst, float(np.max(np.abs(tweedie(z_t, eps, t, sched) - z0))))
    return _le("Tweedie round trip", worst, tol)


def check_identity_step() -> Check:
    sched = make_schedule(T_train=10, beta_start=0.0, beta_end=0.0, n_substeps=10, test_mode=True)
    c, d = coefficients_cd(5, 4, sched)
    return _le("identity-step coefficients (1, 0)", abs(c - 1.0) + abs(d), 0.0)


def check_unroll_determinism(repeats: int = 3, seed: int = 0) -> Check:
    sched = make_schedule()
    model = _ToyScore(8, seed)
    zT = np.random.default_rng(seed).standard_normal(8)
    outs = [sample_deterministic(model, zT, sched)[0] for _ in range(repeats)]
    same = all(np.array_equal(outs[0], o) for o in outs[1:])
    return Check("eta = 0 unroll bit-determinism", same, 0.0 if same else 1.0, 0.0)


SUITE: list[Callable[[], Check | list[Check]]] = [
    check_autodiff,
    lambda: check_eit_adjoint(instances=5),
    check_eit_hvp,
    check_eit_homogeneity,
    check_ns_decay,
    check_ns_mean,
    check_max_principle,
    check_ddim_forms,
    check_tweedie_roundtrip,
    check_identity_step,
    check_unroll_determinism,
]


def run_suite() -> list[Check]:
    out: list[Check] = []
    for fn in SUITE:
        r = fn()
        out.extend(r if isinstance(r, list) else [r])
    return out
