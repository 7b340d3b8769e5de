"""Stochastic mean curvature flow of periodic 1-D graphs.

Finite element solver for the regularized Ito form of the graph flow
driven by scalar or sine-mode Brownian noise, plus the Monte Carlo studies
built on it (strong convergence rates, stability, energy dissipation,
noise thresholding) and a CLI that runs them from config files or named
presets.
"""

from .fem import (
    FemSpace,
    FeFunction,
    Mesh,
    PeriodicBandedMatrix,
    assemble_arctan_vector,
    assemble_mass,
    assemble_noise_vector,
    assemble_stiffness,
    assemble_weighted_stiffness,
    build_space,
    discrete_laplacian,
    elliptic_project,
    h1_seminorm,
    l2_norm,
    l2_project,
)
from .noise import (
    FieldIncrement,
    FieldPath,
    NoiseModel,
    ScalarPath,
    coarsen,
    generate_field_path,
    generate_scalar_path,
    sample_rng,
)
from .stepper import (
    NewtonError,
    SolverConfig,
    StepReport,
    Trajectory,
    drift_jacobian,
    drift_residual,
    run_batch,
    run_trajectory,
    step,
)
from .experiments import (
    EnergySeries,
    EnsembleStats,
    InitialProfile,
    RateTable,
    ThresholdCase,
    classify_growth,
    convergence_study,
    delta_scaling_study,
    energy_study,
    run_ensemble,
    run_ensemble_states,
    threshold_study,
)

__version__ = "0.1.0"
