from .data import Dataset, blob_field, gen_dataset, grf_field, inject_noise
from .eit import (
    DEFAULT_RTOL,
    SIGMA_MAX,
    SIGMA_MIN,
    CurrentPatternSet,
    SolverError,
    boundary_angles,
    boundary_nodes,
    boundary_restriction_matrix,
    eit_adjoint_gradient,
    eit_hvp,
    eit_misfit,
    eit_solve,
    eit_vjp,
    harmonic_extension,
    trig_patterns,
)
from .navier_stokes import CFLError, Grid, kolmogorov_forcing, ns_forward, velocity
