"""Tilted fictitious play for linear-quadratic mean field games with common noise."""

from mfgplay.noise import (
    DrivingPath,
    GirsanovWeights,
    NoiseBank,
    TimeGrid,
    brownian_nodes,
    girsanov_weight,
    girsanov_weights,
    interpolate_linear,
    sample_noise_bank,
    shift_path,
)
from mfgplay.riccati import RiccatiTable, continuous_riccati, discrete_riccati
from mfgplay.hermite import (
    FeatureStandardizer,
    HermiteFeatures,
    HermiteRegressor,
    MultiIndexSet,
    fit_standardizer,
    hermite_1d,
    hermite_tensor,
    weighted_least_squares,
)
from mfgplay.model import LQModel, make_coupling
from mfgplay.reference import (
    ReferenceSolution,
    ReferenceSolver,
    picard_step,
    reference_cost,
    simulate_ou_forward,
    solve_reference,
)
from mfgplay.policy import (
    AdamState,
    ControlProblem,
    FeedbackPolicy,
    RolloutBatch,
    adam_optimize,
    analytic_best_response,
    cost_gradient,
    empirical_cost,
    rollout,
)
from mfgplay.play import (
    PlayConfig,
    PlayState,
    TiltedFictitiousPlay,
    averaged_guess_update,
    play_step,
    run,
    vanishing_viscosity,
)
from mfgplay.analysis import (
    EquilibriumSet,
    deterministic_equilibria,
    exploitability,
    l2_error,
    potential_scan,
    terminal_histogram,
    validation_error,
)

__version__ = "0.1.0"
