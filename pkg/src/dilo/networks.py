"""Small differentiable networks: score MLP, autoencoder, spectral surrogate body.

Parameters are plain lists of numpy arrays. Forward functions accept either
arrays or graph tensors for both inputs and parameters, so the same code runs
frozen inference (parameters as constants) and training (parameters as leaves).

Spectral layers use dense DFT matrices restricted to the retained modes; the
complex mode weights are stored as separate real and imaginary arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Callable, Sequence

import numpy as np

from .diffusion import DiffusionSchedule
from .physics.eit import SIGMA_MAX, SIGMA_MIN, boundary_restriction_matrix
from .tensor_core import Graph, OptimizerConfig, Tensor, concat, optimizer_update
from .tensor_core.fd import fd_jacobian

log = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpArch:
    widths: tuple[int, ...]
    activation: str = "tanh"
    zero_last: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("an MLP needs input, at least one hidden layer, and output widths")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def param_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))


@dataclass(frozen=True)
class SpectralArch:
    """Lift -> ``n_blocks`` spectral blocks -> two-layer projection.

    ``modes`` counts retained frequencies per axis on each side of zero;
    ``modes >= grid // 2 + 1`` keeps every mode.
    """

    grid: int
    modes: int
    width: int = 16
    n_blocks: int = 3
    out_channels: int = 8
    proj_width: int = 32
    restrict_boundary: bool = True
    in_shift: float = 0.2
    in_scale: float = 0.2
    out_scale: float = 1.0

    def __post_init__(self):
        if self.modes < 1 or self.grid < 2 or self.width < 1 or self.n_blocks < 1:
            raise ValueError("spectral architecture sizes must be positive")


def _cat(parts, axis):
    if any(isinstance(p, Tensor) for p in parts):
        return concat(parts, axis=axis)
    return np.concatenate(parts, axis=axis)


def _activate(x, name: str):
    if isinstance(x, Tensor):
        return x.tanh() if name == "tanh" else x.relu()
    return np.tanh(x) if name == "tanh" else np.maximum(x, 0.0)


# --- initialisation -----------------------------------------------------------


def _kaiming(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(seed: int, arch: MlpArch | SpectralArch) -> list[np.ndarray]:
    """Kaiming-uniform weights and zero biases, deterministic in ``(seed, arch)``."""
    rng = np.random.default_rng(seed)
    if isinstance(arch, MlpArch):
        params = []
        n_layers = len(arch.widths) - 1
        for k, (a, b) in enumerate(zip(arch.widths[:-1], arch.widths[1:])):
            W = _kaiming(rng, a, (a, b))
            if arch.zero_last and k == n_layers - 1:
                W = np.zeros((a, b))
            params += [W, np.zeros(b)]
        return params
    if isinstance(arch, SpectralArch):
        basis = spectral_basis(arch.grid, arch.modes)
        w, S = arch.width, basis.n_modes
        params = [_kaiming(rng, 3, (w, 3)), np.zeros((w, 1))]
        # complex mode weights follow the usual neural-operator scale 1/(in*out) per mode
        scale = 1.0 / (w * w)
        for _ in range(arch.n_blocks):
            params += [
                scale * rng.uniform(-1, 1, size=(w, w, S)),
                scale * rng.uniform(-1, 1, size=(w, w, S)),
                _kaiming(rng, w, (w, w)),
                np.zeros((w, 1)),
            ]
        params += [
            _kaiming(rng, w, (arch.proj_width, w)),
            np.zeros((arch.proj_width, 1)),
            _kaiming(rng, arch.proj_width, (arch.out_channels, arch.proj_width)),
            np.zeros((arch.out_channels, 1)),
        ]
        return params
    raise TypeError(f"unsupported architecture {type(arch).__name__}")


# --- MLP ----------------------------------------------------------------------


def mlp_forward(params: Sequence[Any], x, activation: str = "tanh"):
    n_layers = len(params) // 2
    h = x
    for k in range(n_layers):
        h = h @ params[2 * k] + params[2 * k + 1]
        if k < n_layers - 1:
            h = _activate(h, activation)
    return h


def time_embedding(t, dim: int) -> np.ndarray:
    """``[sin(t w_k), cos(t w_k)]`` with ``w_k = 10000^(-k / (dim/2))``."""
    if dim % 2:
        raise ValueError("time embedding dimension must be even")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# --- spectral operator ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    grid: int
    modes: int
    kx: np.ndarray
    ky: np.ndarray
    fwd_re: np.ndarray  # (S, n*n)
    fwd_im: np.ndarray
    inv_re: np.ndarray  # (n*n, S)
    inv_im: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.kx.size


@lru_cache(maxsize=16)
def spectral_basis(grid: int, modes: int) -> SpectralBasis:
    """Unitary 2D DFT rows/columns for the retained frequency set."""
    n = grid
    k = np.arange(n)
    kept = k[np.minimum(k, n - k) < modes]
    KY, KX = np.meshgrid(kept, kept, indexing="ij")
    ky, kx = KY.ravel(), KX.ravel()
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    phase = 2.0 * np.pi * (np.outer(ky, i.ravel()) + np.outer(kx, j.ravel())) / n
    fwd = np.exp(-1j * phase) / n
    inv = np.exp(1j * phase).T / n
    return SpectralBasis(n, modes, kx, ky, fwd.real.copy(), fwd.imag.copy(), inv.real.copy(), inv.imag.copy())


def spectral_conv(basis: SpectralBasis, v, w_re, w_im):
    """Channel-mixing convolution on retained modes; ``v`` has shape (..., C, n*n).

    Mode mixing runs as one batched matmul over the mode axis: ``(S, B, C) @ (S, C, C')``.
    """
    vr = v @ basis.fwd_re.T
    vi = v @ basis.fwd_im.T
    shape = tuple(vr.shape)
    lead, (c_in, S) = shape[:-2], shape[-2:]
    B = int(np.prod(lead, dtype=np.int64))
    vr = vr.reshape((B, c_in, S)).transpose(2, 0, 1)
    vi = vi.reshape((B, c_in, S)).transpose(2, 0, 1)
    wr = w_re.transpose(2, 0, 1)
    wi = w_im.transpose(2, 0, 1)
    c_out = np.shape(w_re)[1]
    out_r = (vr @ wr - vi @ wi).transpose(1, 2, 0).reshape(lead + (c_out, S))
    out_i = (vr @ wi + vi @ wr).transpose(1, 2, 0).reshape(lead + (c_out, S))
    return out_r @ basis.inv_re.T - out_i @ basis.inv_im.T


def full_mode_weights(basis: SpectralBasis, w_re: np.ndarray, w_im: np.ndarray) -> np.ndarray:
    """Embed retained-mode weights into the full ``(C, C, n, n)`` complex grid (zero elsewhere)."""
    n = basis.grid
    full = np.zeros(w_re.shape[:2] + (n, n), dtype=complex)
    full[:, :, basis.ky, basis.kx] = w_re + 1j * w_im
    return full


@lru_cache(maxsize=16)
def _coord_channels(n: int) -> np.ndarray:
    x = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(x, x, indexing="xy")
    return np.stack([X.ravel(), Y.ravel()])


@lru_cache(maxsize=16)
def _centering(B: int) -> np.ndarray:
    return np.eye(B) - np.full((B, B), 1.0 / B)


@lru_cache(maxsize=16)
def _restriction_T(n: int) -> np.ndarray:
    return boundary_restriction_matrix(n).T.copy()


def boundary_restrict(field, n: int):
    """Boundary-ring values of ``(..., n*n)`` fields, shape ``(..., 4(n-1))``."""
    return field @ _restriction_T(n)


def spectral_body(arch: SpectralArch, params: Sequence[Any], a):
    """Per-channel interior fields ``(..., out_channels, n*n)`` from conductivity ``a`` ``(..., n, n)``."""
    n = arch.grid
    if tuple(np.shape(a)[-2:]) != (n, n):
        raise ValueError(f"surrogate expects a {n}x{n} grid, got shape {np.shape(a)}")
    basis = spectral_basis(n, arch.modes)
    lead = tuple(np.shape(a)[:-2])
    x = (a - arch.in_shift) * (1.0 / arch.in_scale)
    x = x.reshape(lead + (1, n * n))
    coords = np.broadcast_to(_coord_channels(n), lead + (2, n * n))
    x = _cat([x, coords], axis=-2)
    v = params[0] @ x + params[1]
    p = 2
    for _ in range(arch.n_blocks):
        w_re, w_im, W, b = params[p : p + 4]
        p += 4
        v = _activate(spectral_conv(basis, v, w_re, w_im) + W @ v + b, "tanh")
    v = _activate(params[p] @ v + params[p + 1], "tanh")
    return params[p + 2] @ v + params[p + 3]


def surrogate_body_forward(arch: SpectralArch, params: Sequence[Any], a):
    """Observation-shaped output: boundary voltages per pattern, mean-removed, or full fields."""
    out = spectral_body(arch, params, a)
    if arch.restrict_boundary:
        out = boundary_restrict(out, arch.grid) @ _centering(4 * (arch.grid - 1))
        return out * arch.out_scale
    lead = tuple(np.shape(a)[:-2])
    return (out * arch.out_scale).reshape(lead + (arch.out_channels, arch.grid, arch.grid))


# --- model bundle -------------------------------------------------------------


@dataclass
class ModelBundle:
    """Score network, autoencoder and (optionally) surrogate parameters with their schedule."""

    grid: int
    latent_dim: int
    schedule: DiffusionSchedule
    score_arch: MlpArch
    score_params: list[np.ndarray]
    enc_arch: MlpArch
    enc_params: list[np.ndarray]
    dec_arch: MlpArch
    dec_params: list[np.ndarray]
    temb_dim: int = 16
    latent_shift: np.ndarray | None = None
    latent_scale: np.ndarray | None = None
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    enc_in_shift: float = 0.2
    enc_in_scale: float = 0.2
    surrogate_arch: SpectralArch | None = None
    surrogate_params: list[np.ndarray] | None = None
    _temb_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.dec_arch.in_dim != self.latent_dim or self.enc_arch.out_dim != self.latent_dim:
            raise ValueError("encoder output, decoder input and latent dim must agree")
        if self.score_arch.out_dim != self.latent_dim or self.score_arch.in_dim != self.latent_dim + self.temb_dim:
            raise ValueError("score network must map latent+time embedding to latent")
        if self.dec_arch.out_dim != self.grid * self.grid or self.enc_arch.in_dim != self.grid * self.grid:
            raise ValueError("autoencoder must act on grid*grid fields")
        if self.surrogate_arch is not None and self.surrogate_arch.grid != self.grid:
            raise ValueError("surrogate grid must match decoder grid")
        if self.latent_shift is None:
            self.latent_shift = np.zeros(self.latent_dim)
        if self.latent_scale is None:
            self.latent_scale = np.ones(self.latent_dim)

    # score network
    def _temb(self, t):
        if np.ndim(t) == 0:
            key = int(t)
            emb = self._temb_cache.get(key)
            if emb is None:
                emb = self._temb_cache[key] = time_embedding(key, self.temb_dim)
            return emb
        return time_embedding(t, self.temb_dim)

    def score(self, z_t, t, params=None):
        return score_forward(self, z_t, t, params)

    def encode(self, a, params=None):
        return encode(self, a, params)

    def decode(self, z, params=None):
        return decode(self, z, params)


def score_forward(bundle: ModelBundle, z_t, t, params=None):
    """Noise prediction ``eps_theta(z_t, t)`` from an MLP on ``[z_t, emb(t)]``."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > bundle.schedule.T_train):
        raise ValueError(f"timestep {t} outside 1..{bundle.schedule.T_train}")
    if np.shape(z_t)[-1] != bundle.latent_dim:
        raise ValueError(f"latent has trailing dim {np.shape(z_t)[-1]}, expected {bundle.latent_dim}")
    params = bundle.score_params if params is None else params
    # first layer split as z @ W[:d] + (emb(t) @ W[d:] + b); the time part is cached per t
    d = bundle.latent_dim
    W1, b1 = params[0], params[1]
    h = z_t @ W1[:d] + _time_bias(bundle, t, W1, b1)
    if len(params) == 2:
        return h
    return mlp_forward(params[2:], _activate(h, bundle.score_arch.activation), bundle.score_arch.activation)


def _time_bias(bundle: ModelBundle, t, W1, b1):
    d = bundle.latent_dim
    if isinstance(W1, Tensor) or isinstance(b1, Tensor) or np.ndim(t) != 0:
        return bundle._temb(t) @ W1[d:] + b1
    key = ("bias", int(t))
    hit = bundle._temb_cache.get(key)
    if hit is None or hit[0] is not W1 or hit[1] is not b1:
        hit = bundle._temb_cache[key] = (W1, b1, bundle._temb(t) @ W1[d:] + b1)
    return hit[2]


def encode(bundle: ModelBundle, a, params=None):
    """Normalised latent code of conductivity field(s) ``(..., n, n)``."""
    n = bundle.grid
    if tuple(np.shape(a)[-2:]) != (n, n):
        raise ValueError(f"encoder expects a {n}x{n} field, got shape {np.shape(a)}")
    params = bundle.enc_params if params is None else params
    lead = tuple(np.shape(a)[:-2])
    x = ((a - bundle.enc_in_shift) * (1.0 / bundle.enc_in_scale)).reshape(lead + (n * n,))
    raw = mlp_forward(params, x, bundle.enc_arch.activation)
    return (raw - bundle.latent_shift) * (1.0 / bundle.latent_scale)


def decode(bundle: ModelBundle, z, params=None):
    """Field in ``[sigma_min, sigma_max]``: an affine map of a final tanh."""
    if np.shape(z)[-1] != bundle.latent_dim:
        raise ValueError(f"latent has trailing dim {np.shape(z)[-1]}, expected {bundle.latent_dim}")
    params = bundle.dec_params if params is None else params
    raw = z * bundle.latent_scale + bundle.latent_shift
    h = mlp_forward(params, raw, bundle.dec_arch.activation)
    h = _activate(h, "tanh")
    half = 0.5 * (bundle.sigma_max - bundle.sigma_min)
    out = (h + 1.0) * half + bundle.sigma_min
    lead = tuple(np.shape(z)[:-1])
    return out.reshape(lead + (bundle.grid, bundle.grid))


def build_bundle(
    grid: int = 16,
    latent_dim: int = 16,
    schedule: DiffusionSchedule | None = None,
    seed: int = 0,
    hidden: int = 128,
    ae_hidden: tuple[int, int] = (128, 64),
    temb_dim: int = 16,
) -> ModelBundle:
    """Freshly initialised bundle; the score network's last layer starts at zero."""
    from .diffusion import make_schedule

    schedule = schedule or make_schedule()
    n2 = grid * grid
    score_arch = MlpArch((latent_dim + temb_dim, hidden, hidden, latent_dim), "tanh", zero_last=True)
    enc_arch = MlpArch((n2, ae_hidden[0], ae_hidden[1], latent_dim))
    dec_arch = MlpArch((latent_dim, ae_hidden[1], ae_hidden[0], n2))
    return ModelBundle(
        grid=grid,
        latent_dim=latent_dim,
        schedule=schedule,
        score_arch=score_arch,
        score_params=init_params(seed + 1, score_arch),
        enc_arch=enc_arch,
        enc_params=init_params(seed + 2, enc_arch),
        dec_arch=dec_arch,
        dec_params=init_params(seed + 3, dec_arch),
        temb_dim=temb_dim,
    )


# --- training -----------------------------------------------------------------


def fit(
    params: list[np.ndarray],
    loss_fn: Callable[[list[Tensor], np.ndarray, np.random.Generator], Tensor],
    data: np.ndarray,
    epochs: int,
    opt: OptimizerConfig,
    rng: np.random.Generator,
    batch_size: int = 64,
    extra: np.ndarray | None = None,
) -> tuple[list[np.ndarray], list[float]]:
    """Minibatch training; returns the final parameters and per-epoch mean losses.

    ``loss_fn(param_tensors, batch, rng)`` builds a scalar on the active graph.
    If ``extra`` is given, batches are ``(data[idx], extra[idx])`` tuples.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    state = None
    history = []
    n = len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = data[idx] if extra is None else (data[idx], extra[idx])
            with Graph() as g:
                leaves = [g.leaf(p) for p in params]
                loss = loss_fn(leaves, batch, rng)
                grads = g.grad(loss, leaves)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError("training loss became non-finite")
            state, params = optimizer_update(state, params, grads, opt)
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
    return params, history


def train_autoencoder(
    bundle: ModelBundle,
    fields: np.ndarray,
    epochs: int,
    opt: OptimizerConfig = OptimizerConfig("adam", 1e-3),
    seed: int = 0,
    batch_size: int = 32,
) -> list[float]:
    """Minimise ``mean ||a - D(E(a))||^2`` in place; also refreshes latent normalisation."""
    fields = np.asarray(fields, dtype=np.float64)
    if len(fields) == 0:
        raise ValueError("cannot train on an empty dataset")
    ne = len(bundle.enc_params)
    bundle.latent_shift = np.zeros(bundle.latent_dim)
    bundle.latent_scale = np.ones(bundle.latent_dim)

    def loss_fn(p, batch, rng):
        z = encode(bundle, batch, p[:ne])
        rec = decode(bundle, z, p[ne:])
        diff = rec - batch
        return (diff * diff).sum(axis=(-2, -1)).mean()

    params, hist = fit(
        bundle.enc_params + bundle.dec_params, loss_fn, fields, epochs, opt, np.random.default_rng(seed), batch_size
    )
    bundle.enc_params, bundle.dec_params = params[:ne], params[ne:]
    raw = mlp_forward(
        bundle.enc_params, ((fields - bundle.enc_in_shift) / bundle.enc_in_scale).reshape(len(fields), -1)
    )
    bundle.latent_shift = raw.mean(axis=0)
    bundle.latent_scale = raw.std(axis=0) + 1e-6
    return hist


def train_score(
    bundle: ModelBundle,
    latents: np.ndarray,
    epochs: int,
    opt: OptimizerConfig = OptimizerConfig("adam", 1e-3),
    seed: int = 0,
    batch_size: int = 64,
) -> list[float]:
    """Minimise the epsilon-matching loss over normalised latents, in place."""
    from .diffusion import diffusion_loss

    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) == 0:
        raise ValueError("cannot train on an empty dataset")

    class _Live:
        def __init__(self, p):
            self.p = p

        def score(self, z, t):
            return score_forward(bundle, z, t, self.p)

    def loss_fn(p, batch, rng):
        return diffusion_loss(_Live(p), batch, bundle.schedule, rng)

    params, hist = fit(bundle.score_params, loss_fn, latents, epochs, opt, np.random.default_rng(seed), batch_size)
    bundle.score_params = params
    return hist


def relative_reconstruction_error(bundle: ModelBundle, fields: np.ndarray) -> np.ndarray:
    rec = decode(bundle, encode(bundle, fields))
    diff = (rec - fields).reshape(len(fields), -1)
    return np.linalg.norm(diff, axis=1) / np.linalg.norm(fields.reshape(len(fields), -1), axis=1)


def score_lipschitz_probe(
    bundle: ModelBundle, latents: np.ndarray, timesteps: Sequence[int], iters: int = 50, h: float = 1e-5
) -> float:
    """Largest ``||d eps_theta / d z_t||_2`` over the probe points (power iteration on FD Jacobians)."""
    best = 0.0
    rng = np.random.default_rng(0)
    for z in np.atleast_2d(latents):
        for t in timesteps:
            J = fd_jacobian(lambda x: score_forward(bundle, x, t), z, h)
            v = rng.standard_normal(J.shape[1])
            sig = 0.0
            for _ in range(iters):
                v = J.T @ (J @ v)
                nv = np.linalg.norm(v)
                if nv == 0:
                    break
                v /= nv
                sig = np.linalg.norm(J @ v)
            best = max(best, float(sig))
    log.info("score Lipschitz probe: %.4g", best)
    return best


def with_surrogate(bundle: ModelBundle, arch: SpectralArch, params: list[np.ndarray]) -> ModelBundle:
    return replace(bundle, surrogate_arch=arch, surrogate_params=params, _temb_cache={})
