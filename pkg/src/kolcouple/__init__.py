"""Couplings of the Kolmogorov diffusion: Brownian motion with its iterated time integrals."""

__version__ = "0.1.0"

from .gaussian import (
    Hyperplane,
    TransitionKernel,
    agreement_hyperplane,
    build_kernel,
    flow_matrix,
    gaussian_density,
    kernel_to_json,
    log_density_ratio,
    maximal_tail,
    mean_and_covariance,
    naive_tv_bounds,
    scaling_matrix,
    tv_distance,
)
from .paths import NoiseStream, PathSample, derive_stream, exact_transition, simulate_path_euler
from .markovian import (
    CouplingOutcome,
    area_cdf,
    area_density,
    area_tail,
    simulate_bck,
    simulate_from,
    simulate_mu_t,
)
from .lookahead import (
    BlockSchedule,
    CouplingMatrixE,
    KLBasis,
    block_gain,
    build_E,
    bounded_horizon_survival_exact,
    iterated_eigenfunction_value,
    lookahead_survival_exact,
    nu_sequence,
    simulate_bounded_horizon,
    simulate_lookahead_paths,
    simulate_lookahead_scalar,
)
from .survival import SurvivalCurve, estimate_survival, fit_rate, tail_window
from .harness import ConfigError, ExperimentConfig, run_experiment
