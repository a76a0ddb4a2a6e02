"""Estimation of constant and time-varying ODE parameters from noisy trajectory data.

The package fits nonlinear ODE models to observed time courses by numerical
solution based least squares: candidate parameters are integrated forward on a
fixed grid, the solution is interpolated at the observation times, and the
squared mismatch is minimized by a global/local hybrid optimizer.  Smooth
time-varying coefficients are represented on a B-spline sieve whose dimension
is selected by small-sample corrected AIC.  Uncertainty comes from a
finite-difference pseudo-information matrix and from a weighted bootstrap.
"""

from .solver import (
    Grid,
    NumericalSolution,
    DivergedTrajectoryError,
    make_uniform_grid,
    integrate,
    interpolate,
    empirical_order,
)
from .splines import SplineConfig, SplineModel, basis_eval, eval_eta, project_function
from .models import (
    OdeSystem,
    Dataset,
    Scenario,
    hiv_system,
    decay_system,
    scenario,
    scenario_eta,
    simulate_dataset,
    write_dataset,
    read_dataset,
)
from .optimize import SearchSpace, OptimizerConfig, MinimizeResult, minimize, refine_local
from .estimator import (
    ParameterVector,
    FitSpec,
    FitReport,
    nls_objective,
    fit,
    evaluate_fit,
    bias_vs_step_study,
)
from .inference import (
    PseudoInformation,
    BootstrapResult,
    pseudo_information,
    weighted_bootstrap,
    aicc,
    select_spline,
    are,
)
from .identify import HivParams, OutputDerivatives, output_derivatives, eta_from_cell_channel, eta_from_virus_channel
from .study import (
    StudyCell,
    CellResult,
    StudyResult,
    StudyError,
    study_cells,
    default_study_spline,
    run_cell,
    run_study,
)

__version__ = "0.1.0"

__all__ = [
    "Grid",
    "NumericalSolution",
    "DivergedTrajectoryError",
    "make_uniform_grid",
    "integrate",
    "interpolate",
    "empirical_order",
    "SplineConfig",
    "SplineModel",
    "basis_eval",
    "eval_eta",
    "project_function",
    "OdeSystem",
    "Dataset",
    "Scenario",
    "hiv_system",
    "decay_system",
    "scenario",
    "scenario_eta",
    "simulate_dataset",
    "write_dataset",
    "read_dataset",
    "SearchSpace",
    "OptimizerConfig",
    "MinimizeResult",
    "minimize",
    "refine_local",
    "ParameterVector",
    "FitSpec",
    "FitReport",
    "nls_objective",
    "fit",
    "evaluate_fit",
    "bias_vs_step_study",
    "PseudoInformation",
    "BootstrapResult",
    "pseudo_information",
    "weighted_bootstrap",
    "aicc",
    "select_spline",
    "are",
    "HivParams",
    "OutputDerivatives",
    "output_derivatives",
    "eta_from_cell_channel",
    "eta_from_virus_channel",
    "StudyCell",
    "CellResult",
    "StudyResult",
    "StudyError",
    "study_cells",
    "default_study_spline",
    "run_cell",
    "run_study",
    "__version__",
]
