"""Reference estimates from the published large-sample analysis.

These are the headline numbers the ``paper-check`` command re-derives from
one another through the estimator identities. They are data, not defaults:
nothing in the estimation code reads them.
"""

from __future__ import annotations

CONSTANTS_VERSION = "1.0"

PUBLISHED: dict = {
    "sample": {
        # analysis sample: grade-5 students with outcome and current score
        "n_students": 148019,
        "n_schools": 3295,
    },
    "medium": {
        # outcome on SES and current score, and current score on SES
        "beta_m": 0.028,
        "gamma_m": 0.381,
        "delta_m": 0.229,
    },
    "iv": {
        # lag-1 instrument: first stage, variance ratio, reduced form, 2SLS
        "pi_hat": 0.887,
        "variance_ratio": 0.992,
        "theta0_hat": 0.030,
        "theta1_hat": 0.383,
        "gamma_iv": 0.432,
        "beta_iv": 0.016,
    },
    "eiv_fs": {
        "lambda_hat": 0.880,
        "beta_hat": 0.016,
        "gamma_hat": 0.433,
    },
    "eiv_th": {
        "lambda_hat": 0.899,
        "fit_r2": 0.981,
        "beta_hat": 0.018,
        "gamma_hat": 0.424,
    },
    "shares": {
        # percent of the contaminated gap attributed to contamination
        "iv_pct": 42.14,
        "range_low_pct": 35.13,
        "range_high_pct": 42.78,
    },
    "diagnostics": {
        # score-change-on-SES slope and its reduction vs the level slope
        "alpha_ses": 0.005,
        "reduction_pct": 97.82,
    },
}
