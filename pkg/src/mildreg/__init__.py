"""mildreg: windowed Picard solutions of semilinear parabolic problems
with nonlocal boundary coupling, plus empirical certification of the
semigroup estimates the construction relies on."""

from ._kernels import BACKEND
from .admissibility import (
    DEFAULT_SEED,
    AdmissibilityCertificate,
    ContractionWindow,
    choose_window,
    estimate_gamma,
    estimate_miyadera_voigt,
    gamma_refinement_study,
    measure_phi_lipschitz,
)
from .errors import (
    ConfigError,
    MaxIterError,
    MildregError,
    NoWindowError,
    NonContractiveError,
    PropagatorOverflowError,
    QuadratureUnresolvedError,
)
from .meshnorm import (
    Grid1D,
    StateVector,
    TimeMesh,
    Trajectory,
    dirichlet_grid,
    l2_norm,
    lp_time_norm,
    mr_norm,
    neumann_grid,
)
from .mildsolve import (
    MildProblem,
    PicardConfig,
    SolveReport,
    convolve,
    oracle_solve,
    phi_map,
    picard_window,
    representation_residual,
    solve,
    strong_residual,
)
from .operators import (
    KernelSpec,
    NonlinearitySpec,
    OperatorBundle,
    apply_nemytskii,
    assemble_boundary_functional,
    assemble_dirichlet_laplacian,
    assemble_neumann_laplacian,
    assemble_nonlocal_dirichlet_generator,
    assemble_nonlocal_neumann_generator,
    boundary_trace_operator,
    dirichlet_map,
    fractional_power,
    make_kernel,
    make_nonlinearity,
    neumann_map,
)
from .problems import (
    build_dirichlet_bundle,
    build_neumann_bundle,
    default_initial_state,
)
from .semigroup import (
    ProbeReport,
    Propagator,
    boundary_smoothing_probe,
    build_propagator,
    evolve,
    evolve_trajectory,
    resolvent_probe,
    smoothing_probe,
    volterra_reconstruct,
)

__version__ = "0.1.0"
