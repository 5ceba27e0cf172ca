"""Forward operators used inside the inversion loop.

Two interchangeable handles: :class:`NeuralSurrogate` (a trained spectral
network) and :class:`ExactSurrogate` (the finite-difference EIT solver with its
adjoint registered as the backward rule). Both map a conductivity field
``(n, n)`` to boundary voltages ``(M, B)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any, Protocol

import numpy as np

from .diffusion import sample_deterministic
from .networks import ModelBundle, SpectralArch, fit, init_params, surrogate_body_forward
from .physics.eit import DEFAULT_RTOL, CurrentPatternSet, _check_sigma, _forward, _System, _vjp
from .tensor_core import Graph, OptimizerConfig, Tensor, custom

log = logging.getLogger(__name__)


class Surrogate(Protocol):
    grid: int

    def __call__(self, a: Any) -> Any: ...


def _check_grid(a, n):
    if tuple(np.shape(a)[-2:]) != (n, n):
        raise ValueError(f"surrogate expects a {n}x{n} field, got shape {np.shape(a)}")


@dataclass(frozen=True, eq=False)
class ExactSurrogate:
    """Exact solver; backward is one adjoint solve per pattern, sharing the forward factorisation."""

    patterns: CurrentPatternSet
    rtol: float = DEFAULT_RTOL
    variant = "exact-adjoint"

    @property
    def grid(self) -> int:
        return self.patterns.n

    @property
    def obs_shape(self) -> tuple[int, int]:
        return (self.patterns.count, self.patterns.n_boundary)

    def __call__(self, a):
        _check_grid(a, self.grid)
        cache = {}

        def fn(sigma):
            sys_ = _System(_check_sigma(sigma, self.grid), self.rtol)
            V, us = _forward(sys_, self.patterns)
            cache["sys"], cache["us"] = sys_, us
            return V

        def vjp(g, sigma):
            return (_vjp(cache["sys"], cache["us"], np.asarray(g))[0],)

        if isinstance(a, Tensor):
            return custom(fn, vjp, [a])
        return fn(np.asarray(a, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class NeuralSurrogate:
    arch: SpectralArch
    params: tuple[np.ndarray, ...]
    variant = "neural"

    @property
    def grid(self) -> int:
        return self.arch.grid

    def __call__(self, a, params=None):
        _check_grid(a, self.grid)
        return surrogate_body_forward(self.arch, self.params if params is None else params, a)


def surrogate_eval(handle, a) -> np.ndarray:
    out = handle(np.asarray(a, dtype=np.float64))
    return np.asarray(out.data if isinstance(out, Tensor) else out)


def surrogate_vjp(handle, a, cotangent) -> np.ndarray:
    """Gradient of ``<cotangent, F(a)>`` with respect to the field ``a``."""
    cot = np.asarray(cotangent, dtype=np.float64)
    with Graph() as g:
        x = g.leaf(np.asarray(a, dtype=np.float64))
        y = handle(x)
        if y.shape != cot.shape:
            raise ValueError(f"cotangent shape {cot.shape} does not match output {y.shape}")
        return g.grad((y * cot).sum(), [x])[0]


@dataclass
class SurrogateFit:
    handle: NeuralSurrogate
    losses: list[float]
    heldout_rel_error: float | None


def train_surrogate(
    params: np.ndarray,
    observations: np.ndarray,
    arch: SpectralArch,
    epochs: int,
    opt: OptimizerConfig = OptimizerConfig("adam", 2e-3),
    seed: int = 0,
    batch_size: int = 16,
    n_heldout: int = 0,
) -> SurrogateFit:
    """Fit a spectral surrogate by minimising the mean squared observation error.

    The last ``n_heldout`` pairs are excluded from training and scored by the
    mean relative l2 error. The output scale is set from the training data.
    """
    params = np.asarray(params, dtype=np.float64)
    observations = np.asarray(observations, dtype=np.float64)
    if len(params) == 0 or len(params) != len(observations):
        raise ValueError("need a nonempty paired dataset of equal lengths")
    n_train = len(params) - n_heldout
    if n_train < 1:
        raise ValueError("no training pairs left after the held-out split")
    tr_a, tr_y = params[:n_train], observations[:n_train]
    scale = float(np.std(tr_y)) or 1.0
    arch = replace(arch, out_scale=scale)

    def loss_fn(p, batch, rng):
        a, y = batch
        diff = (surrogate_body_forward(arch, p, a) - y) * (1.0 / scale)
        return (diff * diff).mean()

    weights, losses = fit(
        init_params(seed, arch), loss_fn, tr_a, epochs, opt, np.random.default_rng(seed), batch_size, extra=tr_y
    )
    # report the loss in observation units
    losses = [v * scale**2 for v in losses]
    handle = NeuralSurrogate(arch, tuple(weights))
    rel = None
    if n_heldout:
        pred = surrogate_eval(handle, params[n_train:])
        ref = observations[n_train:]
        num = np.linalg.norm((pred - ref).reshape(n_heldout, -1), axis=1)
        rel = float(np.mean(num / np.linalg.norm(ref.reshape(n_heldout, -1), axis=1)))
        log.info("surrogate held-out relative error %.4f", rel)
    return SurrogateFit(handle, losses, rel)


# --- measurement loss over the initial latent ------------------------------------


def measurement_loss(bundle: ModelBundle, handle, y_obs, z_T):
    """``0.5 ||F(D(z_0(z_T))) - y_obs||^2`` built on the active graph."""
    z0, _ = sample_deterministic(bundle, z_T, bundle.schedule)
    diff = handle(bundle.decode(z0)) - y_obs
    return 0.5 * (diff * diff).sum()


def latent_value_and_grad(bundle: ModelBundle, handle, y_obs, z_T) -> tuple[float, np.ndarray]:
    with Graph() as g:
        z = g.leaf(np.asarray(z_T, dtype=np.float64))
        loss = measurement_loss(bundle, handle, y_obs, z)
        return loss.item(), g.grad(loss, [z])[0]


@dataclass
class GapStats:
    grad_max: float
    grad_mean: float
    value_max: float
    value_mean: float
    per_probe: np.ndarray  # latent gradient gap at each probe


def gap_estimate(neural, exact, bundle: ModelBundle, z_probes, y_obs) -> GapStats:
    """Latent-gradient and value discrepancy between two handles at probe latents ``z_T``.

    Both gradients run through the same deterministic unroll and decoder, so
    probes lie on the decoder's image by construction.
    """
    y_obs = np.asarray(y_obs, dtype=np.float64)
    gaps, vals = [], []
    for z in np.atleast_2d(z_probes):
        _, g_s = latent_value_and_grad(bundle, neural, y_obs, z)
        _, g_e = latent_value_and_grad(bundle, exact, y_obs, z)
        gaps.append(np.linalg.norm(g_s - g_e))
        a = bundle.decode(sample_deterministic(bundle, z, bundle.schedule)[0])
        vals.append(np.linalg.norm(surrogate_eval(neural, a) - surrogate_eval(exact, a)))
    gaps, vals = np.array(gaps), np.array(vals)
    return GapStats(float(gaps.max()), float(gaps.mean()), float(vals.max()), float(vals.mean()), gaps)
