"""Synthetic datasets and measurement noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .eit import SIGMA_MAX, SIGMA_MIN, CurrentPatternSet, eit_solve, trig_patterns
from .navier_stokes import ns_forward

BACKGROUND = 0.2
GRF_ALPHA = 2.5
GRF_TAU = 3.0


@dataclass
class Dataset:
    kind: str
    params: np.ndarray  # (count, n, n)
    observations: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.params.shape[0]

    @property
    def grid(self) -> int:
        return self.params.shape[-1]

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        obs = self.observations
        a = Dataset(self.kind, self.params[:n_train], None if obs is None else obs[:n_train], dict(self.meta))
        b = Dataset(self.kind, self.params[n_train:], None if obs is None else obs[n_train:], dict(self.meta))
        return a, b


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def blob_field(rng: np.random.Generator, n: int) -> np.ndarray:
    """Background 0.2 plus one to three Gaussian bumps, clipped to the admissible range."""
    h = 1.0 / n
    x = (np.arange(n) + 0.5) * h
    X, Y = np.meshgrid(x, x, indexing="xy")
    sigma = np.full((n, n), BACKGROUND)
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        width = rng.uniform(0.07, 0.15)
        amp = rng.uniform(0.2, 0.6)
        sigma += amp * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * width**2))
    return np.clip(sigma, SIGMA_MIN, SIGMA_MAX)


def grf_field(rng: np.random.Generator, n: int, alpha: float = GRF_ALPHA, tau: float = GRF_TAU) -> np.ndarray:
    """Zero-mean periodic Gaussian random field with spectrum ``(|k|^2 + tau^2)^-alpha``.

    Normalized to unit expected pointwise variance.
    """
    ky = np.fft.fftfreq(n, 1.0 / n)
    kx = np.fft.rfftfreq(n, 1.0 / n)
    KX, KY = np.meshgrid(kx, ky, indexing="xy")
    spec = (KX**2 + KY**2 + tau**2) ** (-alpha)
    spec[0, 0] = 0.0
    full = (np.fft.fftfreq(n, 1.0 / n)[None, :] ** 2 + ky[:, None] ** 2 + tau**2) ** (-alpha)
    full[0, 0] = 0.0
    scale = n / np.sqrt(full.sum())
    noise_hat = np.fft.rfft2(rng.standard_normal((n, n)))
    w_hat = noise_hat * np.sqrt(spec) * scale
    w_hat[0, 0] = 0.0
    return np.fft.irfft2(w_hat, s=(n, n))


def gen_dataset(
    kind: str,
    count: int,
    seed: int,
    grid: int = 16,
    patterns: CurrentPatternSet | None = None,
    ns_time: float = 1.0,
    ns_dt: float = 1e-2,
    with_observations: bool = True,
) -> Dataset:
    """``eit-blobs`` conductivities (with exact voltages) or ``ns-grf`` vorticities.

    Sample ``i`` depends only on ``(seed, i)``, so datasets of different sizes
    share their common prefix.
    """
    if count < 1:
        raise ValueError("dataset needs at least one sample")
    if kind == "eit-blobs":
        params = np.array([blob_field(_sample_rng(seed, i), grid) for i in range(count)])
        obs = None
        meta = {"grid": grid}
        if with_observations:
            patterns = patterns or trig_patterns(grid)
            obs = np.array([eit_solve(p, patterns)[0] for p in params])
            meta["patterns"] = patterns.count
        return Dataset(kind, params, obs, meta)
    if kind == "ns-grf":
        params = np.array([grf_field(_sample_rng(seed, i), grid) for i in range(count)])
        obs = None
        if with_observations:
            obs = np.array([ns_forward(w, T=ns_time, dt=ns_dt) for w in params])
        return Dataset(kind, params, obs, {"grid": grid, "T": ns_time, "dt": ns_dt})
    raise ValueError(f"unknown dataset kind {kind!r}; expected 'eit-blobs' or 'ns-grf'")


def inject_noise(y, gamma: float, rng: np.random.Generator, eps: np.ndarray | None = None) -> np.ndarray:
    """``y + gamma * std(y) * eps`` with ``eps`` standard normal (or supplied)."""
    if gamma < 0:
        raise ValueError("noise level must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    if gamma == 0:
        return y.copy()
    if eps is None:
        eps = rng.standard_normal(y.shape)
    return y + gamma * np.std(y) * np.asarray(eps)
