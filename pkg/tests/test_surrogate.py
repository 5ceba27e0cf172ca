import numpy as np
import pytest

from dilo.networks import SpectralArch, init_params
from dilo.physics import eit_adjoint_gradient, eit_solve, gen_dataset, trig_patterns
from dilo.physics.data import blob_field
from dilo.surrogate import (
    ExactSurrogate,
    NeuralSurrogate,
    gap_estimate,
    surrogate_eval,
    surrogate_vjp,
    train_surrogate,
)
from dilo.tensor_core import OptimizerConfig, finite_difference_gradient, relative_error


@pytest.fixture(scope="module")
def exact8():
    return ExactSurrogate(trig_patterns(8, 4))


def test_exact_matches_solver(exact8):
    a = blob_field(np.random.default_rng(0), 8)
    assert np.array_equal(surrogate_eval(exact8, a), eit_solve(a, exact8.patterns)[0])
    assert exact8.obs_shape == (4, 28) and exact8.variant == "exact-adjoint"
    with pytest.raises(ValueError):
        exact8(np.ones((6, 6)))


def test_exact_vjp_is_adjoint_gradient(exact8):
    rng = np.random.default_rng(1)
    a, t = blob_field(rng, 8), blob_field(rng, 8)
    v_obs = eit_solve(t, exact8.patterns)[0]
    residual = surrogate_eval(exact8, a) - v_obs
    g_adj, _ = eit_adjoint_gradient(a, exact8.patterns, v_obs)
    # misfit is 0.5 ||V - V_obs||^2, so its gradient is the vjp of the residual
    assert relative_error(surrogate_vjp(exact8, a, residual), g_adj) < 1e-12
    with pytest.raises(ValueError, match="cotangent"):
        surrogate_vjp(exact8, a, np.ones(3))


def test_neural_vjp_matches_fd():
    arch = SpectralArch(grid=8, modes=3, width=4, n_blocks=2, out_channels=4, proj_width=8)
    h = NeuralSurrogate(arch, tuple(init_params(0, arch)))
    rng = np.random.default_rng(2)
    a = blob_field(rng, 8)
    cot = rng.standard_normal((4, 28))
    g = surrogate_vjp(h, a, cot)
    fd = finite_difference_gradient(lambda x: float(np.sum(surrogate_eval(h, x) * cot)), a, 1e-6)
    assert relative_error(g, fd) < 1e-7


@pytest.fixture(scope="module")
def tiny_data(exact8):
    return gen_dataset("eit-blobs", 60, seed=4, grid=8, patterns=exact8.patterns)


def test_overfit_few_samples(tiny_data):
    arch = SpectralArch(grid=8, modes=3, width=8, n_blocks=2, out_channels=4, proj_width=16)
    fit = train_surrogate(tiny_data.params[:5], tiny_data.observations[:5], arch, epochs=1500,
                          opt=OptimizerConfig("adam", 5e-3), batch_size=5)
    assert len(fit.losses) == 1500 and fit.heldout_rel_error is None
    assert fit.losses[-1] < 1e-4
    assert fit.handle.arch.out_scale == pytest.approx(float(np.std(tiny_data.observations[:5])))


def test_train_surrogate_errors(tiny_data):
    arch = SpectralArch(grid=8, modes=2, width=4, n_blocks=1, out_channels=4)
    with pytest.raises(ValueError):
        train_surrogate(tiny_data.params[:3], tiny_data.observations[:2], arch, 1)
    with pytest.raises(ValueError, match="held-out"):
        train_surrogate(tiny_data.params[:3], tiny_data.observations[:3], arch, 1, n_heldout=3)


def test_gap_zero_for_identical_handles(exact8):
    from dilo.diffusion import make_schedule
    from dilo.networks import build_bundle

    b = build_bundle(grid=8, latent_dim=4, hidden=8, ae_hidden=(8, 8), temb_dim=4, schedule=make_schedule(n_substeps=3))
    y = np.zeros(exact8.obs_shape)
    g = gap_estimate(exact8, exact8, b, np.random.default_rng(0).standard_normal((2, 4)), y)
    assert g.grad_max == 0.0 and g.value_max == 0.0 and g.per_probe.shape == (2,)


# --- trained artefacts (shared session fixtures) ------------------------------------------


@pytest.mark.slow
def test_trained_surrogate_heldout_error(artifacts):
    assert artifacts.surrogate_fit.heldout_rel_error < 0.10


@pytest.mark.slow
def test_gap_shrinks_with_training(artifacts):
    b, ex = artifacts.bundle, artifacts.exact
    early = artifacts.surrogate_early
    probes = np.random.default_rng(11).standard_normal((3, b.latent_dim))
    y = surrogate_eval(ex, artifacts.heldout_params[0])
    g_early = gap_estimate(early, ex, b, probes, y)
    g_late = gap_estimate(artifacts.surrogate, ex, b, probes, y)
    assert g_late.grad_mean <= 0.7 * g_early.grad_mean
