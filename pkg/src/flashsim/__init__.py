"""Spontaneous-collapse flash dynamics on finite lattice Hilbert spaces.

The package samples piecewise-deterministic trajectories of a non-unitary
semigroup interrupted by random collapse events, for distinguishable
particles, symmetrised few-particle sectors, and number-truncated field
modes, and verifies the exact identities those processes must satisfy.
"""

from ._backend import BACKEND_NAME, get_backend
from .errors import (
    BadProfileError,
    BasisMismatchError,
    ConfigError,
    ConfigParseError,
    ConfigValidationError,
    DimensionOverflowError,
    EmptySectorError,
    ExponentOverflowError,
    FlashSimError,
    LatticeMismatchError,
    NegativeTimeError,
    NonMonotoneHistoryError,
    NotHermitianError,
    NotNormalizedError,
    NotPositiveError,
    ReducedStateMismatchError,
    StepTooLargeError,
    TableTooLargeError,
    ZeroNormError,
    ZeroProbabilityFlashError,
    ZeroTotalRateError,
)
from .linalg import (
    hermitian_sqrt,
    partial_trace,
    require_hermitian,
    sector_basis,
    sector_projector,
    semigroup_exp,
    trace_distance,
)
from .model import (
    DeltaProfile,
    FlashModel,
    FlashRecord,
    GaussianProfile,
    HamiltonianSpec,
    Lattice,
    MatterDensityField,
    RateOperatorFamily,
    basis_state,
    build_fock_model,
    build_grw_model,
    build_identical_model,
    collapse,
    compose_direct_sum,
    compose_tensor,
    conditional_wave_function,
    creation_operators,
    flash_rate_density,
    fock_basis,
    kernel_apply,
    matter_density,
    one_particle_hamiltonian,
    one_particle_rate_family,
    propagate,
    split_by_support,
)
from .rng import PhiloxStream
from .sampler import (
    EnsembleResult,
    RawTrajectory,
    SamplerConfig,
    TrajectoryState,
    initial_trajectory_state,
    run_ensemble,
    run_trajectory,
    sample_flash_site,
    sample_waiting_time,
    step,
)
from .verify import (
    CheckReport,
    Chi2Result,
    DensityMatrixState,
    FlashDensityTable,
    QuadratureGrid,
    check_consistency,
    check_constants,
    check_master_vs_ensemble,
    check_no_signalling,
    check_normalization,
    check_second_quantization,
    chi_squared_against,
    exact_flash_density,
    first_flash_marginals,
    flash_expansion_density_matrix,
    integrate_master_equation,
    ks_statistic,
    liouvillian_matrix,
    master_rhs,
    superoperator_flow,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME",
    "BadProfileError",
    "BasisMismatchError",
    "CheckReport",
    "Chi2Result",
    "ConfigError",
    "ConfigParseError",
    "ConfigValidationError",
    "DeltaProfile",
    "DensityMatrixState",
    "DimensionOverflowError",
    "EmptySectorError",
    "EnsembleResult",
    "ExponentOverflowError",
    "FlashDensityTable",
    "FlashModel",
    "FlashRecord",
    "FlashSimError",
    "GaussianProfile",
    "HamiltonianSpec",
    "Lattice",
    "LatticeMismatchError",
    "MatterDensityField",
    "NegativeTimeError",
    "NonMonotoneHistoryError",
    "NotHermitianError",
    "NotNormalizedError",
    "NotPositiveError",
    "PhiloxStream",
    "QuadratureGrid",
    "RateOperatorFamily",
    "RawTrajectory",
    "ReducedStateMismatchError",
    "SamplerConfig",
    "StepTooLargeError",
    "TableTooLargeError",
    "TrajectoryState",
    "ZeroNormError",
    "ZeroProbabilityFlashError",
    "ZeroTotalRateError",
    "basis_state",
    "build_fock_model",
    "build_grw_model",
    "build_identical_model",
    "check_consistency",
    "check_constants",
    "check_master_vs_ensemble",
    "check_no_signalling",
    "check_normalization",
    "check_second_quantization",
    "chi_squared_against",
    "collapse",
    "compose_direct_sum",
    "compose_tensor",
    "conditional_wave_function",
    "creation_operators",
    "exact_flash_density",
    "first_flash_marginals",
    "flash_expansion_density_matrix",
    "flash_rate_density",
    "fock_basis",
    "get_backend",
    "hermitian_sqrt",
    "initial_trajectory_state",
    "integrate_master_equation",
    "kernel_apply",
    "ks_statistic",
    "liouvillian_matrix",
    "master_rhs",
    "matter_density",
    "one_particle_hamiltonian",
    "one_particle_rate_family",
    "partial_trace",
    "propagate",
    "require_hermitian",
    "run_ensemble",
    "run_trajectory",
    "sample_flash_site",
    "sample_waiting_time",
    "sector_basis",
    "sector_projector",
    "semigroup_exp",
    "step",
    "superoperator_flow",
    "trace_distance",
    "__version__",
]
