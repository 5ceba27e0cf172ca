"""DDPM schedule, forward noising, Tweedie estimate and the DDIM update.

Every function works on plain arrays and on graph tensors alike, so the
deterministic unroll in :func:`sample_deterministic` is differentiable with
respect to the initial latent.

Sign convention: the network predicts the noise ``eps``. Tweedie then reads
``z0 = (z_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)`` and the DDIM drift adds
``+ sqrt(1 - abar_prev) * eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .tensor_core import Tensor


class ScoreModel(Protocol):
    def score(self, z_t: Any, t: Any) -> Any: ...


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    betas: np.ndarray
    substeps: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))
        object.__setattr__(self, "substeps", np.asarray(self.substeps, dtype=np.int64))
        object.__setattr__(self, "_padded", np.concatenate([[1.0], self.alpha_bars]))
        object.__setattr__(self, "_cd", {})

    @property
    def T_train(self) -> int:
        return self.betas.size

    def alpha_bar(self, t) -> Any:
        """``abar_t`` for ``t`` in ``0..T_train`` with ``abar_0 := 1``; ``t`` may be an int array."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 0) or np.any(t_arr > self.T_train):
            raise ValueError(f"timestep {t} outside 0..{self.T_train}")
        out = self._padded[t_arr]
        return float(out) if out.ndim == 0 else out

    def pairs(self) -> list[tuple[int, int]]:
        """Consecutive ``(t, t_prev)`` pairs; the last one steps to ``t_prev = 0``."""
        s = [int(x) for x in self.substeps] + [0]
        return list(zip(s[:-1], s[1:]))

    def with_substeps(self, n_substeps: int) -> "DiffusionSchedule":
        return DiffusionSchedule(self.betas, _even_substeps(self.T_train, n_substeps))


def _even_substeps(T_train: int, n: int) -> np.ndarray:
    if not 1 <= n <= T_train:
        raise ValueError(f"need 1 <= n_substeps <= T_train, got {n} and {T_train}")
    if n == 1:
        return np.array([T_train])
    steps = np.round(np.linspace(T_train, 1, n)).astype(np.int64)
    if np.any(np.diff(steps) >= 0):
        raise ValueError("substeps are not strictly decreasing")
    return steps


def make_schedule(
    T_train: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    n_substeps: int = 50,
    test_mode: bool = False,
) -> DiffusionSchedule:
    """Linear beta schedule with evenly spaced, endpoint-inclusive substeps.

    ``test_mode`` admits the degenerate betas 0 and 1 used by unit tests.
    """
    if T_train < 1:
        raise ValueError("T_train must be >= 1")
    if test_mode:
        ok = 0.0 <= beta_start <= beta_end <= 1.0
    else:
        ok = 0.0 < beta_start <= beta_end < 1.0
    if not ok:
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T_train)
    return DiffusionSchedule(betas, _even_substeps(T_train, n_substeps))


def _coef(ab):
    if isinstance(ab, np.ndarray):
        return ab.reshape(-1, 1)
    return ab


def _check_train_t(t, schedule):
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T_train):
        raise ValueError(f"timestep {t} outside 1..{schedule.T_train}")


def forward_noise(z0, t, eps, schedule: DiffusionSchedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` may be one int per batch row."""
    _check_train_t(t, schedule)
    if np.shape(z0) != np.shape(eps):
        raise ValueError(f"noise shape {np.shape(eps)} differs from latent shape {np.shape(z0)}")
    ab = _coef(schedule.alpha_bar(t))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def tweedie(z_t, eps_hat, t, schedule: DiffusionSchedule):
    if np.shape(z_t) != np.shape(eps_hat):
        raise ValueError(f"shapes differ: {np.shape(z_t)} vs {np.shape(eps_hat)}")
    ab = _coef(schedule.alpha_bar(t))
    if np.any(np.asarray(ab) == 0.0):
        raise ZeroDivisionError(f"abar_t = 0 at t={t}; Tweedie estimate undefined")
    inv = 1.0 / np.sqrt(ab)
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) * inv


def coefficients_cd(t: int, t_prev: int, schedule: DiffusionSchedule) -> tuple[float, float]:
    """``z_prev = c z_t + d eps_hat`` form of the deterministic step."""
    hit = schedule._cd.get((t, t_prev))
    if hit is not None:
        return hit
    if not t > t_prev:
        raise ValueError(f"need t > t_prev, got {t}, {t_prev}")
    ab, abp = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    c = np.sqrt(abp) / np.sqrt(ab)
    d = np.sqrt(1.0 - abp) - c * np.sqrt(1.0 - ab)
    out = schedule._cd[(t, t_prev)] = (float(c), float(d))
    return out


def ddim_delta(t: int, t_prev: int, schedule: DiffusionSchedule) -> float:
    ab, abp = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    if ab == abp:
        return 0.0
    return float(np.sqrt((1.0 - abp) / (1.0 - ab)) * np.sqrt(1.0 - ab / abp))


def _ddim(z_t, eps_hat, t, t_prev, schedule, eta, noise):
    if not t > t_prev:
        raise ValueError(f"need t > t_prev, got {t}, {t_prev}")
    if eta > 0 and noise is None:
        raise ValueError("eta > 0 requires a noise sample")
    if eta == 0 and noise is not None:
        raise ValueError("noise given but eta = 0")
    abp = schedule.alpha_bar(t_prev)
    z0_hat = tweedie(z_t, eps_hat, t, schedule)
    if eta == 0:
        return np.sqrt(abp) * z0_hat + np.sqrt(1.0 - abp) * eps_hat, z0_hat
    delta = ddim_delta(t, t_prev, schedule)
    var = 1.0 - abp - (eta * delta) ** 2
    if var < -1e-15:
        raise ValueError(f"eta={eta} too large: eta^2 delta^2 exceeds 1 - abar_prev at t={t}")
    var = max(var, 0.0)
    return np.sqrt(abp) * z0_hat + np.sqrt(var) * eps_hat + (eta * delta) * noise, z0_hat


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: DiffusionSchedule, eta: float = 0.0, noise=None):
    """One DDIM update from ``t`` to ``t_prev``; ``eta = 0`` is deterministic."""
    return _ddim(z_t, eps_hat, t, t_prev, schedule, eta, noise)[0]


@dataclass
class TrajectoryRecord:
    timesteps: list[int] = field(default_factory=list)
    z: list[np.ndarray] = field(default_factory=list)
    eps: list[np.ndarray] = field(default_factory=list)
    z0_hat: list[np.ndarray] = field(default_factory=list)
    z0: np.ndarray | None = None


def _value(x):
    return np.array(x.data if isinstance(x, Tensor) else x)


def sample_deterministic(model: ScoreModel, z_T, schedule: DiffusionSchedule, record: bool = False):
    """Unroll the eta = 0 trajectory from ``z_T`` to ``z_0``.

    Returns ``(z0, record_or_None)``. Works on graph tensors, in which case
    ``z0`` is differentiable with respect to ``z_T``.
    """
    rec = TrajectoryRecord() if record else None
    z = z_T
    for t, t_prev in schedule.pairs():
        eps = model.score(z, t)
        # collapsed c z + d eps form of the eta = 0 step: fewer graph nodes, same map
        c, d = coefficients_cd(t, t_prev, schedule)
        if rec is not None:
            rec.timesteps.append(t)
            rec.z.append(_value(z))
            rec.eps.append(_value(eps))
            rec.z0_hat.append(tweedie(_value(z), _value(eps), t, schedule))
        z = c * z + d * eps
    if rec is not None:
        rec.z0 = _value(z)
    return z, rec


def sample_stochastic(model: ScoreModel, z_T, schedule: DiffusionSchedule, eta: float, rng: np.random.Generator):
    """DDIM with fresh noise each step; exists to show the loss is not a fixed function of ``z_T``."""
    z = z_T
    for t, t_prev in schedule.pairs():
        eps = model.score(z, t)
        noise = rng.standard_normal(np.shape(z)) if eta > 0 else None
        z = ddim_step(z, eps, t, t_prev, schedule, eta, noise)
    return z


def diffusion_loss(model: ScoreModel, z0_batch, schedule: DiffusionSchedule, rng: np.random.Generator):
    """Batch mean of ``||eps - eps_theta(z_t, t)||^2`` with ``t ~ U{1..T_train}``."""
    z0 = z0_batch
    shape = np.shape(z0)
    if len(shape) != 2 or shape[0] == 0:
        raise ValueError(f"expected a nonempty (batch, latent) array, got shape {shape}")
    t = rng.integers(1, schedule.T_train + 1, size=shape[0])
    eps = rng.standard_normal(shape)
    z_t = forward_noise(z0, t, eps, schedule)
    diff = model.score(z_t, t) - eps
    return (diff * diff).sum(axis=-1).mean()
