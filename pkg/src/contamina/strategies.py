"""Estimation strategies for the conditional gap under score contamination.

The medium regression (outcome on SES and the current reported score) is the
contaminated baseline. Three corrections are implemented:

* ``iv_strategy``: instrument the current score with a lagged score.
* ``eiv_fs_strategy``: estimate reliability from the adjusted first-stage
  slope, then apply the errors-in-variables correction.
* ``eiv_th_strategy``: build adjusted first-stage slopes at every available
  lag, extrapolate the trend back to lag zero, and use that as reliability.

All regressions share the cluster-robust machinery in ``regress``; joint
standard errors for the corrected estimators come from stacking the component
regressions and applying the delta method.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .core_model import (
    PERIOD_LABELS,
    PanelDataset,
    RegressionFit,
    VariableSpec,
    avg_score_column,
)
from .errors import (
    DegreeTooHigh,
    InsufficientData,
    LambdaOutOfRange,
    MissingColumn,
    NonpositiveVariance,
    TooFewLags,
    ZeroBaseline,
)
from .regress import StackedSystem, delta_method, ols_fit, stacked_fit, tsls_fit


@dataclass(frozen=True)
class StrategyEstimate:
    """One strategy's conditional-gap estimate and supporting pieces."""

    method: str
    beta_hat: float
    gamma_hat: float
    lambda_hat: float | None
    se_beta: float | None
    se_gamma: float | None
    n_obs: int
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "beta_hat": self.beta_hat,
            "gamma_hat": self.gamma_hat,
            "lambda_hat": self.lambda_hat,
            "se_beta": self.se_beta,
            "se_gamma": self.se_gamma,
            "n_obs": self.n_obs,
            "details": self.details,
        }


def _frame(data) -> pd.DataFrame:
    return data.frame if isinstance(data, PanelDataset) else data


def _complete(frame: pd.DataFrame, columns: list[str]) -> pd.DataFrame:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise MissingColumn(f"missing columns: {missing}")
    return frame.dropna(subset=columns)


def _current_label(data) -> str:
    if isinstance(data, PanelDataset):
        return data.current_period()
    frame = _frame(data)
    for label in reversed(PERIOD_LABELS):
        column = avg_score_column(label)
        if column in frame.columns and frame[column].notna().any():
            return label
    raise MissingColumn("no composite score column with data found")


def _lagged_label(current: str, tau: int) -> str:
    index = PERIOD_LABELS.index(current) - tau
    if index < 0:
        raise InsufficientData(
            f"no period {tau} steps before {current} on the grade grid"
        )
    return PERIOD_LABELS[index]


def medium_regression(
    data,
    *,
    outcome: str = "outcome",
    ses: str = "ses",
    period: str | None = None,
    cluster: str = "school_id",
    compute_covariance: bool = True,
) -> RegressionFit:
    """Outcome on SES and the reported score: the contaminated baseline.

    The SES coefficient is the contaminated conditional gap and the score
    coefficient is the contaminated score loading.
    """
    label = period if period is not None else _current_label(data)
    spec = VariableSpec(outcome, (ses, avg_score_column(label)), cluster)
    return ols_fit(data, spec, compute_covariance=compute_covariance)


def balancing_regression(
    data,
    period: str | None = None,
    *,
    ses: str = "ses",
    cluster: str = "school_id",
    compute_covariance: bool = True,
) -> RegressionFit:
    """Reported score for one period on SES; the slope is the score gap."""
    label = period if period is not None else _current_label(data)
    spec = VariableSpec(avg_score_column(label), (ses,), cluster)
    return ols_fit(data, spec, compute_covariance=compute_covariance)


def ols_strategy(
    data,
    *,
    outcome: str = "outcome",
    ses: str = "ses",
    cluster: str = "school_id",
    se_method: str = "clustered",
) -> StrategyEstimate:
    """The uncorrected medium regression packaged as a strategy result."""
    compute = se_method != "none"
    label = _current_label(data)
    score = avg_score_column(label)
    frame = _frame(data)
    sub = _complete(frame, [outcome, ses, score, cluster])
    medium = medium_regression(
        sub, outcome=outcome, ses=ses, period=label, cluster=cluster,
        compute_covariance=compute,
    )
    balancing = balancing_regression(
        sub, label, ses=ses, cluster=cluster, compute_covariance=compute
    )
    return StrategyEstimate(
        method="ols",
        beta_hat=medium.coef(ses),
        gamma_hat=medium.coef(score),
        lambda_hat=None,
        se_beta=medium.se(ses) if compute else None,
        se_gamma=medium.se(score) if compute else None,
        n_obs=medium.n_obs,
        details={
            "period": label,
            "delta_m": balancing.coef(ses),
            "se_delta_m": balancing.se(ses) if compute else None,
        },
    )


def iv_strategy(
    data,
    *,
    outcome: str = "outcome",
    ses: str = "ses",
    lag: int = 1,
    cluster: str = "school_id",
    se_method: str = "clustered",
) -> StrategyEstimate:
    """Instrument the current score with the score ``lag`` periods back.

    The first stage, reduced form, and 2SLS all run on the common
    complete-case sample, so the reported ratio identities hold exactly.
    """
    compute = se_method != "none"
    cur = _current_label(data)
    lagged = _lagged_label(cur, lag)
    score_cur = avg_score_column(cur)
    score_lag = avg_score_column(lagged)
    frame = _frame(data)
    sub = _complete(frame, [outcome, ses, score_cur, score_lag, cluster])

    first = ols_fit(
        sub,
        VariableSpec(score_cur, (ses, score_lag), cluster),
        compute_covariance=compute,
    )
    reduced = ols_fit(
        sub,
        VariableSpec(outcome, (ses, score_lag), cluster),
        compute_covariance=False,
    )
    second = tsls_fit(
        sub,
        outcome=outcome,
        endogenous=score_cur,
        instrument=score_lag,
        exogenous=(ses,),
        cluster_name=cluster,
        compute_covariance=compute,
    )
    return StrategyEstimate(
        method="iv",
        beta_hat=second.coef(ses),
        gamma_hat=second.coef(score_cur),
        lambda_hat=None,
        se_beta=second.se(ses) if compute else None,
        se_gamma=second.se(score_cur) if compute else None,
        n_obs=second.n_obs,
        details={
            "period": cur,
            "lag_period": lagged,
            "lag": lag,
            "pi_hat": first.coef(score_lag),
            "se_pi": first.se(score_lag) if compute else None,
            "kappa_hat": first.coef(ses),
            "theta1_hat": reduced.coef(score_lag),
            "theta0_hat": reduced.coef(ses),
        },
    )


def adjusted_first_stage(
    pi_hat: float, resid_var_lag: float, resid_var_current: float
) -> float:
    """Rescale a first-stage slope by the SES-partialled variance ratio.

    The raw slope attenuates by the lagged score's noise share; multiplying
    by Var(resid lag)/Var(resid current) turns it into an estimate of
    reliability times the ability lag-correlation.
    """
    if resid_var_lag <= 0 or resid_var_current <= 0:
        raise NonpositiveVariance(
            f"residual variances must be positive, got lag={resid_var_lag}, "
            f"current={resid_var_current}"
        )
    return pi_hat * resid_var_lag / resid_var_current


def eiv_correct(
    beta_m: float, gamma_m: float, delta_m: float, lambda_: float
) -> tuple[float, float]:
    """Errors-in-variables correction of the medium regression.

    Given reliability ``lambda_``, the score loading inflates to
    gamma_m / lambda_ and the conditional gap drops by
    gamma_m * delta_m * (1 - lambda_) / lambda_.
    """
    if not 0.0 < lambda_ <= 1.0:
        raise LambdaOutOfRange(f"reliability must be in (0, 1], got {lambda_}")
    gamma_eiv = gamma_m / lambda_
    beta_eiv = beta_m - gamma_m * delta_m * (1.0 - lambda_) / lambda_
    return beta_eiv, gamma_eiv


def _clip_reliability(raw: float) -> tuple[float, bool]:
    # estimates above 1 are sampling noise; below 0 they are fatal
    if raw > 1.0:
        return 1.0, True
    return raw, False


def eiv_fs_strategy(
    data,
    *,
    outcome: str = "outcome",
    ses: str = "ses",
    lag: int = 1,
    cluster: str = "school_id",
    se_method: str = "stacked",
) -> StrategyEstimate:
    """EIV correction with reliability from the adjusted first stage.

    Standard errors stack the medium, current balancing, and first-stage
    regressions into one clustered system and delta-method through the
    correction, holding the residual variance ratio fixed.
    """
    compute = se_method != "none"
    cur = _current_label(data)
    lagged = _lagged_label(cur, lag)
    score_cur = avg_score_column(cur)
    score_lag = avg_score_column(lagged)
    frame = _frame(data)
    sub = _complete(frame, [outcome, ses, score_cur, score_lag, cluster])

    medium = ols_fit(
        sub, VariableSpec(outcome, (ses, score_cur), cluster), compute_covariance=False
    )
    bal_cur = ols_fit(
        sub, VariableSpec(score_cur, (ses,), cluster), compute_covariance=False
    )
    bal_lag = ols_fit(
        sub, VariableSpec(score_lag, (ses,), cluster), compute_covariance=False
    )
    first = ols_fit(
        sub, VariableSpec(score_cur, (ses, score_lag), cluster), compute_covariance=False
    )

    beta_m = medium.coef(ses)
    gamma_m = medium.coef(score_cur)
    delta_m = bal_cur.coef(ses)
    pi_hat = first.coef(score_lag)
    ratio = bal_lag.residual_variance / bal_cur.residual_variance
    lambda_raw = adjusted_first_stage(
        pi_hat, bal_lag.residual_variance, bal_cur.residual_variance
    )
    lambda_hat, clipped = _clip_reliability(lambda_raw)
    beta_eiv, gamma_eiv = eiv_correct(beta_m, gamma_m, delta_m, lambda_hat)

    se_beta = se_gamma = se_lambda = None
    if compute:
        system = StackedSystem(
            equations=(
                (VariableSpec(outcome, (ses, score_cur), cluster), "med"),
                (VariableSpec(score_cur, (ses,), cluster), "bal"),
                (VariableSpec(score_cur, (ses, score_lag), cluster), "fs"),
            )
        )
        joint = stacked_fit(sub, system)
        lam = lambda_hat
        d_lambda_d_pi = 0.0 if clipped else ratio
        _, se_gamma = delta_method(
            joint,
            lambda c: c[f"med:{score_cur}"] / lam,
            {
                f"med:{score_cur}": 1.0 / lam,
                f"fs:{score_lag}": -gamma_m / lam**2 * d_lambda_d_pi,
            },
        )
        shrink = (1.0 - lam) / lam
        _, se_beta = delta_method(
            joint,
            lambda c: c[f"med:{ses}"] - c[f"med:{score_cur}"] * c[f"bal:{ses}"] * shrink,
            {
                f"med:{ses}": 1.0,
                f"med:{score_cur}": -delta_m * shrink,
                f"bal:{ses}": -gamma_m * shrink,
                f"fs:{score_lag}": gamma_m * delta_m / lam**2 * d_lambda_d_pi,
            },
        )
        se_lambda = joint.se(f"fs:{score_lag}") * abs(d_lambda_d_pi) if not clipped else 0.0

    return StrategyEstimate(
        method="eiv_fs",
        beta_hat=beta_eiv,
        gamma_hat=gamma_eiv,
        lambda_hat=lambda_hat,
        se_beta=se_beta,
        se_gamma=se_gamma,
        n_obs=medium.n_obs,
        details={
            "period": cur,
            "lag_period": lagged,
            "lag": lag,
            "beta_m": beta_m,
            "gamma_m": gamma_m,
            "delta_m": delta_m,
            "pi_hat": pi_hat,
            "variance_ratio": ratio,
            "lambda_raw": lambda_raw,
            "lambda_clipped": clipped,
            "se_lambda": se_lambda,
        },
    )


@dataclass(frozen=True)
class ReliabilityPoint:
    tau: int
    label: str
    pi_prime: float
    se: float | None
    n_obs: int


@dataclass(frozen=True)
class ReliabilitySeries:
    """Adjusted first-stage slopes by lag depth, ascending in tau."""

    points: tuple[ReliabilityPoint, ...]
    current: str

    @property
    def taus(self) -> np.ndarray:
        return np.array([p.tau for p in self.points], dtype=float)

    @property
    def values(self) -> np.ndarray:
        return np.array([p.pi_prime for p in self.points], dtype=float)


def build_reliability_series(
    data,
    *,
    ses: str = "ses",
    cluster: str = "school_id",
    min_lags: int = 3,
    compute_se: bool = True,
) -> ReliabilitySeries:
    """Adjusted first-stage slope at every usable lag behind the current period.

    Each lag uses its own complete-case sample (students differ in which
    early periods they have). Lags whose sample cannot support the
    three-parameter first stage are skipped; fewer than ``min_lags`` usable
    lags raises TooFewLags.
    """
    cur = _current_label(data)
    cur_index = PERIOD_LABELS.index(cur)
    score_cur = avg_score_column(cur)
    frame = _frame(data)

    points: list[ReliabilityPoint] = []
    for tau in range(1, cur_index + 1):
        label = PERIOD_LABELS[cur_index - tau]
        score_lag = avg_score_column(label)
        if score_lag not in frame.columns:
            continue
        sub = _complete(frame, [ses, score_cur, score_lag, cluster])
        if len(sub) < 4:
            continue
        first = ols_fit(
            sub,
            VariableSpec(score_cur, (ses, score_lag), cluster),
            compute_covariance=compute_se,
        )
        bal_cur = ols_fit(
            sub, VariableSpec(score_cur, (ses,), cluster), compute_covariance=False
        )
        bal_lag = ols_fit(
            sub, VariableSpec(score_lag, (ses,), cluster), compute_covariance=False
        )
        ratio = bal_lag.residual_variance / bal_cur.residual_variance
        pi_prime = adjusted_first_stage(
            first.coef(score_lag),
            bal_lag.residual_variance,
            bal_cur.residual_variance,
        )
        se = first.se(score_lag) * abs(ratio) if compute_se else None
        points.append(ReliabilityPoint(tau, label, pi_prime, se, len(sub)))

    if len(points) < min_lags:
        raise TooFewLags(
            f"need at least {min_lags} usable lags behind {cur}, found {len(points)}"
        )
    return ReliabilitySeries(points=tuple(points), current=cur)


@dataclass(frozen=True)
class ReliabilityForecast:
    """Polynomial fit of the reliability series in lag depth."""

    coefficients: tuple[float, ...]
    degree: int
    fitted_by_tau: Mapping[int, float]
    fit_r2: float

    def at(self, tau: float) -> float:
        return float(np.polynomial.polynomial.polyval(tau, self.coefficients))


def fit_reliability_polynomial(
    series: ReliabilitySeries, degree: int = 1, *, weighted: bool = False
) -> ReliabilityForecast:
    """Least-squares polynomial in tau through the series points."""
    if degree not in (1, 2, 3):
        raise DegreeTooHigh(f"degree must be 1, 2, or 3, got {degree}")
    n = len(series.points)
    if n < degree + 2:
        raise DegreeTooHigh(
            f"degree {degree} needs at least {degree + 2} lag points, have {n}"
        )
    x = series.taus
    y = series.values
    w = None
    if weighted:
        ses_ = [p.se for p in series.points]
        if any(s is None or s <= 0 for s in ses_):
            raise NonpositiveVariance("weighted fit needs positive ses at every lag")
        w = 1.0 / np.array(ses_, dtype=float)
    coefs = np.polynomial.polynomial.polyfit(x, y, degree, w=w)
    fitted = np.polynomial.polynomial.polyval(x, coefs)
    ssr = float(np.sum((y - fitted) ** 2))
    tss = float(np.sum((y - y.mean()) ** 2))
    if tss > 0:
        r2 = 1.0 - ssr / tss
    else:
        r2 = 1.0 if ssr <= 1e-12 else 0.0
    return ReliabilityForecast(
        coefficients=tuple(float(c) for c in coefs),
        degree=degree,
        fitted_by_tau={p.tau: float(f) for p, f in zip(series.points, fitted)},
        fit_r2=r2,
    )


def forecast_reliability(
    series: ReliabilitySeries,
    degree: int = 1,
    *,
    weighted: bool = False,
    eval_tau: float = 0.0,
) -> tuple[float, float]:
    """Extrapolate the reliability series to ``eval_tau``; returns (lambda, R2)."""
    forecast = fit_reliability_polynomial(series, degree, weighted=weighted)
    return forecast.at(eval_tau), forecast.fit_r2


def eiv_th_strategy(
    data,
    *,
    outcome: str = "outcome",
    ses: str = "ses",
    degree: int = 1,
    cluster: str = "school_id",
    se_method: str = "stacked",
    min_lags: int = 3,
    eval_tau: float = 0.0,
) -> StrategyEstimate:
    """EIV correction with reliability forecast from the full lag series.

    Robust to drift that is correlated with current ability: such drift tilts
    the series in tau but leaves its lag-zero limit at the true reliability.
    Standard errors treat the forecast reliability as fixed and stack the
    medium and balancing regressions.
    """
    compute = se_method != "none"
    cur = _current_label(data)
    score_cur = avg_score_column(cur)
    series = build_reliability_series(
        data, ses=ses, cluster=cluster, min_lags=min_lags, compute_se=compute
    )
    forecast = fit_reliability_polynomial(series, degree)
    lambda_raw = forecast.at(eval_tau)
    lambda_hat, clipped = _clip_reliability(lambda_raw)

    frame = _frame(data)
    sub = _complete(frame, [outcome, ses, score_cur, cluster])
    medium = ols_fit(
        sub, VariableSpec(outcome, (ses, score_cur), cluster), compute_covariance=False
    )
    bal = ols_fit(
        sub, VariableSpec(score_cur, (ses,), cluster), compute_covariance=False
    )
    beta_m = medium.coef(ses)
    gamma_m = medium.coef(score_cur)
    delta_m = bal.coef(ses)
    beta_eiv, gamma_eiv = eiv_correct(beta_m, gamma_m, delta_m, lambda_hat)

    se_beta = se_gamma = None
    if compute:
        system = StackedSystem(
            equations=(
                (VariableSpec(outcome, (ses, score_cur), cluster), "med"),
                (VariableSpec(score_cur, (ses,), cluster), "bal"),
            )
        )
        joint = stacked_fit(sub, system)
        lam = lambda_hat
        _, se_gamma = delta_method(
            joint,
            lambda c: c[f"med:{score_cur}"] / lam,
            {f"med:{score_cur}": 1.0 / lam},
        )
        shrink = (1.0 - lam) / lam
        _, se_beta = delta_method(
            joint,
            lambda c: c[f"med:{ses}"] - c[f"med:{score_cur}"] * c[f"bal:{ses}"] * shrink,
            {
                f"med:{ses}": 1.0,
                f"med:{score_cur}": -delta_m * shrink,
                f"bal:{ses}": -gamma_m * shrink,
            },
        )

    return StrategyEstimate(
        method="eiv_th",
        beta_hat=beta_eiv,
        gamma_hat=gamma_eiv,
        lambda_hat=lambda_hat,
        se_beta=se_beta,
        se_gamma=se_gamma,
        n_obs=medium.n_obs,
        details={
            "period": cur,
            "degree": degree,
            "beta_m": beta_m,
            "gamma_m": gamma_m,
            "delta_m": delta_m,
            "lambda_raw": lambda_raw,
            "lambda_clipped": clipped,
            "fit_r2": forecast.fit_r2,
            "series": [
                {
                    "tau": p.tau,
                    "label": p.label,
                    "pi_prime": p.pi_prime,
                    "se": p.se,
                    "n_obs": p.n_obs,
                    "fitted": forecast.fitted_by_tau[p.tau],
                }
                for p in series.points
            ],
        },
    )


def share_explained(beta_m: float, beta_corrected: float) -> float:
    """Percent of the contaminated gap attributed to contamination."""
    if beta_m == 0:
        raise ZeroBaseline("contaminated gap is zero; share undefined")
    return 100.0 * (beta_m - beta_corrected) / beta_m
