"""Contamination-corrected conditional gap estimation.

Conditional gaps regress an outcome on a group variable while controlling
for a test score. Measurement error in the score leaks part of the score
gap into the group coefficient. This package quantifies that contamination
and corrects it with instrumental-variables and errors-in-variables
strategies whose reliability inputs come from the score panel itself, plus
a Monte Carlo harness that verifies the closed-form bias algebra.
"""

from .core_model import (
    DOMAINS,
    GRADES,
    PERIOD_LABELS,
    TERMS,
    PanelDataset,
    RegressionFit,
    VariableSpec,
    avg_score_column,
    read_panel_csv,
    standardize,
    validate_dataset,
)
from .diagnostics import (
    DiagnosticReport,
    delta_path,
    delta_regressions,
    variance_implication_check,
)
from .mc_verify import McResult, McSummary, closed_form_predictions, mc_run
from .regress import (
    StackedSystem,
    clustered_covariance,
    delta_method,
    ols_fit,
    stacked_fit,
    tsls_fit,
)
from .simulate import (
    DgpConfig,
    DriftLaw,
    PopulationMoments,
    SyntheticPanel,
    dgp_moments,
    kelley_score,
    simulate_panel,
)
from .strategies import (
    ReliabilitySeries,
    StrategyEstimate,
    adjusted_first_stage,
    balancing_regression,
    build_reliability_series,
    eiv_correct,
    eiv_fs_strategy,
    eiv_th_strategy,
    forecast_reliability,
    iv_strategy,
    medium_regression,
    ols_strategy,
    share_explained,
)

__version__ = "0.1.0"

__all__ = [
    "DOMAINS",
    "GRADES",
    "PERIOD_LABELS",
    "TERMS",
    "DgpConfig",
    "DiagnosticReport",
    "DriftLaw",
    "McResult",
    "McSummary",
    "PanelDataset",
    "PopulationMoments",
    "RegressionFit",
    "ReliabilitySeries",
    "StackedSystem",
    "StrategyEstimate",
    "SyntheticPanel",
    "VariableSpec",
    "adjusted_first_stage",
    "avg_score_column",
    "balancing_regression",
    "build_reliability_series",
    "clustered_covariance",
    "closed_form_predictions",
    "delta_method",
    "delta_path",
    "delta_regressions",
    "dgp_moments",
    "eiv_correct",
    "eiv_fs_strategy",
    "eiv_th_strategy",
    "forecast_reliability",
    "iv_strategy",
    "kelley_score",
    "mc_run",
    "medium_regression",
    "ols_fit",
    "ols_strategy",
    "read_panel_csv",
    "share_explained",
    "simulate_panel",
    "stacked_fit",
    "standardize",
    "tsls_fit",
    "validate_dataset",
    "variance_implication_check",
    "__version__",
]
