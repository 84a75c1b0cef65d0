"""Diatom/TEP chemostat model: simulation, sensitivities, identification."""

from .diagnostics import (
    PreconditionNotMet,
    RegimeReport,
    check_positivity,
    check_quota_threshold,
    fit_log_slope,
    limited_regime_oracle,
)
from .harness import (
    EmptyInput,
    TrialRecord,
    TrialStatistics,
    default_initial_state,
    generate_target,
    perturb_parameters,
    run_trials,
    summarize,
)
from .identify import (
    CostEvaluation,
    IdentificationConfig,
    ObservationSet,
    PhaseResult,
    SingularNormalMatrix,
    StageResult,
    evaluate_cost,
    gauss_newton,
    gauss_newton_step,
    golden_section,
    gradient_descent_steps,
    modified_gauss_newton,
    staged_identify,
    stopping_criterion,
)
from .model import (
    FREE_PARAMETER_NAMES,
    PARAMETER_NAMES,
    STATE_NAMES,
    TARGET_PARAMETERS,
    ParameterFileError,
    ParameterSet,
    RateValues,
    consumption_M,
    consumption_N,
    growth_rate,
    jac_params,
    jac_state,
    limiter_A,
    load_parameters,
    mucilage_rate,
    rates,
    rhs,
    save_parameters,
    uptake_rate_C,
    uptake_rate_N,
)
from .solver import (
    BlowUp,
    IntegrationConfig,
    Trajectory,
    detect_blowup,
    integrate,
    integrate_with_sensitivity,
    read_trajectory_csv,
    rk4_step,
    write_trajectory_csv,
)

__version__ = "0.1.0"
