import numpy as np
import pytest

from dilo.diffusion import diffusion_loss, make_schedule
from dilo.networks import (
    MlpArch,
    SpectralArch,
    boundary_restrict,
    build_bundle,
    decode,
    encode,
    fit,
    full_mode_weights,
    init_params,
    mlp_forward,
    relative_reconstruction_error,
    score_forward,
    score_lipschitz_probe,
    spectral_basis,
    spectral_body,
    surrogate_body_forward,
    time_embedding,
    train_autoencoder,
    train_score,
)
from dilo.tensor_core import OptimizerConfig, fd_jacobian, finite_difference_gradient, jacobian, relative_error, value_and_grad


def test_param_count_and_determinism():
    arch = MlpArch((4, 8, 2))
    assert arch.param_count() == 58
    p = init_params(0, arch)
    assert sum(w.size for w in p) == 58
    assert all(np.array_equal(a, b) for a, b in zip(p, init_params(0, arch)))
    assert not np.array_equal(p[0], init_params(1, arch)[0])
    assert not p[1].any() and not p[3].any()


def test_arch_validation():
    with pytest.raises(ValueError):
        MlpArch((4, 2))
    with pytest.raises(ValueError):
        MlpArch((4, 0, 2))
    with pytest.raises(ValueError):
        MlpArch((4, 3, 2), activation="gelu")
    with pytest.raises(TypeError):
        init_params(0, "mlp")


def test_time_embedding():
    e = time_embedding(0, 8)
    assert np.array_equal(e, [0, 0, 0, 0, 1, 1, 1, 1])
    assert time_embedding(np.array([3, 7]), 16).shape == (2, 16)
    with pytest.raises(ValueError):
        time_embedding(1, 7)


@pytest.fixture(scope="module")
def small_bundle():
    return build_bundle(grid=8, latent_dim=4, hidden=16, ae_hidden=(16, 8), temb_dim=4, seed=5)


def test_fresh_score_is_zero(small_bundle):
    z = np.random.default_rng(0).standard_normal((3, 4))
    assert not score_forward(small_bundle, z, 500).any()


def test_score_jacobian_matches_fd(small_bundle):
    b = small_bundle
    params = [p.copy() for p in b.score_params]
    params[-2] = np.random.default_rng(1).standard_normal(params[-2].shape) * 0.3
    z = np.random.default_rng(2).standard_normal(4)
    J = jacobian(lambda x: score_forward(b, x, 321, params), z)
    Jfd = fd_jacobian(lambda x: score_forward(b, x, 321, params), z)
    assert relative_error(J, Jfd) < 1e-7


def test_score_validates_inputs(small_bundle):
    with pytest.raises(ValueError, match="timestep"):
        score_forward(small_bundle, np.zeros(4), 0)
    with pytest.raises(ValueError, match="latent"):
        score_forward(small_bundle, np.zeros(5), 10)


def test_decoder_range(small_bundle):
    z = 5.0 * np.random.default_rng(3).standard_normal((10_000, 4))
    a = decode(small_bundle, z)
    assert a.shape == (10_000, 8, 8)
    assert a.min() >= small_bundle.sigma_min and a.max() <= small_bundle.sigma_max


def test_encoder_shape_check(small_bundle):
    with pytest.raises(ValueError):
        encode(small_bundle, np.ones((7, 7)))


def test_autoencoder_memorises_single_sample():
    b = build_bundle(grid=8, latent_dim=4, hidden=16, ae_hidden=(32, 16), temb_dim=4, seed=0)
    x = np.random.default_rng(0).uniform(0.1, 0.5, size=(1, 8, 8))
    hist = train_autoencoder(b, x, epochs=400, opt=OptimizerConfig("adam", 3e-3), batch_size=1)
    assert len(hist) == 400
    assert hist[-1] < 1e-3 * hist[0]
    assert relative_reconstruction_error(b, x)[0] < 1e-2
    assert np.allclose(encode(b, x), 0.0, atol=1e-3)  # single sample is centred by the refreshed shift


def test_zero_network_diffusion_loss_is_latent_dim(small_bundle):
    z0 = np.random.default_rng(0).standard_normal((4000, 4))
    loss = diffusion_loss(small_bundle, z0, small_bundle.schedule, np.random.default_rng(1))
    assert loss == pytest.approx(4.0, rel=0.05)


def test_score_training_reduces_loss():
    b = build_bundle(grid=8, latent_dim=2, hidden=32, ae_hidden=(8, 8), temb_dim=4, seed=0)
    z0 = np.random.default_rng(0).standard_normal((256, 2)) * 0.1 + 1.0
    hist = train_score(b, z0, epochs=30, opt=OptimizerConfig("adam", 3e-3), batch_size=64)
    assert len(hist) == 30
    assert np.mean(hist[-5:]) < 0.8 * hist[0]
    with pytest.raises(ValueError, match="empty"):
        train_score(b, np.zeros((0, 2)), epochs=1)
    assert np.isfinite(score_lipschitz_probe(b, z0[:2], [10, 900], iters=5))


def test_fit_rejects_empty():
    with pytest.raises(ValueError):
        fit([np.zeros(2)], lambda p, b, r: p[0].sum(), np.zeros((0, 2)), 1, OptimizerConfig("adam", 1e-3), np.random.default_rng(0))


# --- spectral pieces ---------------------------------------------------------------------


def test_dft_roundtrip_full_modes():
    n = 8
    basis = spectral_basis(n, n // 2 + 1)
    assert basis.n_modes == n * n
    x = np.random.default_rng(0).standard_normal(n * n)
    xr, xi = basis.fwd_re @ x, basis.fwd_im @ x
    back = basis.inv_re @ xr - basis.inv_im @ xi
    assert np.max(np.abs(back - x)) < 1e-10
    F = np.fft.fft2(x.reshape(n, n)) / n
    full = np.zeros((n, n), complex)
    full[basis.ky, basis.kx] = xr + 1j * xi
    assert np.allclose(full, F, atol=1e-12)


def test_mode_truncation():
    n = 8
    assert spectral_basis(n, 1).n_modes == 1
    assert spectral_basis(n, 2).n_modes == 9
    w = np.ones((1, 1, 1))
    fw = full_mode_weights(spectral_basis(n, 1), w, 0 * w)
    assert fw.shape == (1, 1, n, n) and fw[0, 0, 0, 0] == 1 and np.count_nonzero(fw) == 1


def test_single_mode_body_is_constant_per_channel():
    arch = SpectralArch(grid=8, modes=1, width=4, n_blocks=1, out_channels=2, proj_width=4)
    p = init_params(0, arch)
    for k in (4, 6):  # zero the local linear paths and lift coordinates
        p[k] = np.zeros_like(p[k])
    p[0] = p[0] * np.array([1.0, 0.0, 0.0])
    a = np.random.default_rng(0).uniform(0.05, 0.9, (8, 8))
    out = spectral_body(arch, p, a)
    assert np.allclose(out, out[..., :1], atol=1e-12)


def test_boundary_restrict_of_constant():
    n = 6
    v = np.full((3, n * n), 2.0)
    r = boundary_restrict(v, n)
    assert r.shape == (3, 4 * (n - 1)) and np.all(r == 2.0)


def test_surrogate_output_shapes_and_centering():
    arch = SpectralArch(grid=8, modes=3, width=4, n_blocks=2, proj_width=8)
    p = init_params(1, arch)
    a = np.random.default_rng(1).uniform(0.05, 0.9, (5, 8, 8))
    y = surrogate_body_forward(arch, p, a)
    assert y.shape == (5, 8, 28)
    assert np.allclose(y.mean(axis=-1), 0, atol=1e-12)
    full = SpectralArch(grid=8, modes=3, width=4, n_blocks=2, proj_width=8, restrict_boundary=False)
    assert surrogate_body_forward(full, p, a).shape == (5, 8, 8, 8)
    with pytest.raises(ValueError):
        surrogate_body_forward(arch, p, np.ones((6, 6)))


def test_surrogate_gradient_matches_fd():
    arch = SpectralArch(grid=8, modes=3, width=4, n_blocks=2, proj_width=8)
    p = init_params(2, arch)
    rng = np.random.default_rng(2)
    a = rng.uniform(0.05, 0.9, (8, 8))
    w = rng.standard_normal((8, 28))

    def f(x):
        return (surrogate_body_forward(arch, p, x) * w).sum()

    _, g = value_and_grad(f, a)
    fd = finite_difference_gradient(lambda x: float(f(x)), a, 1e-6)
    assert relative_error(g, fd) < 1e-7


def test_mlp_forward_matches_manual():
    p = init_params(3, MlpArch((3, 5, 2)))
    x = np.array([0.1, -0.2, 0.3])
    assert np.allclose(mlp_forward(p, x), np.tanh(x @ p[0] + p[1]) @ p[2] + p[3])
