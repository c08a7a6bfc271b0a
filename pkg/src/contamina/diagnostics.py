"""Drift diagnostics: is score growth balanced on student characteristics?

The identifying assumptions behind the lag-based corrections restrict how
ability drift may relate to observables and to past ability. These checks
regress score changes on characteristics (``delta_regressions``,
``delta_path``) and, when ground truth is available, test the variance
bookkeeping of the drift process directly (``variance_implication_check``).
Diagnostics only report; they never gate an estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .core_model import PERIOD_LABELS, VariableSpec, avg_score_column
from .errors import InsufficientData, NoTruthColumns
from .regress import ols_fit
from .strategies import _complete, _current_label, _frame

SIGNIFICANCE_DEFAULT = 0.01
_CHANGE = "score_change"


def _change_fit(frame, characteristic, cur_label, tau, cluster, compute_se=True):
    """Regress the tau-period score change on one characteristic."""
    index = PERIOD_LABELS.index(cur_label) - tau
    if index < 0:
        raise InsufficientData(
            f"no period {tau} steps before {cur_label} on the grade grid"
        )
    lag_label = PERIOD_LABELS[index]
    score_cur = avg_score_column(cur_label)
    score_lag = avg_score_column(lag_label)
    if score_lag not in frame.columns:
        return None, None, lag_label
    sub = _complete(frame, [characteristic, score_cur, score_lag, cluster])
    if len(sub) < 3:
        return None, None, lag_label
    sub = sub.assign(**{_CHANGE: sub[score_cur] - sub[score_lag]})
    fit = ols_fit(
        sub,
        VariableSpec(_CHANGE, (characteristic,), cluster),
        compute_covariance=compute_se,
    )
    return fit, sub, lag_label


def _two_sided_p(alpha_hat: float, se: float) -> tuple[float, float]:
    # exact-zero residuals give se 0; a zero slope then carries no evidence
    if se == 0:
        if abs(alpha_hat) <= 1e-10:
            return 0.0, 1.0
        return float("inf"), 0.0
    t = alpha_hat / se
    return t, float(2.0 * stats.norm.sf(abs(t)))


@dataclass(frozen=True)
class DriftCheck:
    """Change-on-characteristic slope next to its level benchmark."""

    characteristic: str
    alpha_hat: float
    se: float
    t_stat: float
    p_value: float
    level_coefficient: float
    reduction_pct: float | None
    n_obs: int
    flag: str

    def to_dict(self) -> dict:
        return {
            "characteristic": self.characteristic,
            "alpha_hat": self.alpha_hat,
            "se": self.se,
            "t_stat": self.t_stat,
            "p_value": self.p_value,
            "level_coefficient": self.level_coefficient,
            "reduction_pct": self.reduction_pct,
            "n_obs": self.n_obs,
            "flag": self.flag,
        }


@dataclass(frozen=True)
class DiagnosticReport:
    checks: tuple[DriftCheck, ...]
    significance: float
    period: str
    lag_period: str

    @property
    def any_warning(self) -> bool:
        return any(c.flag == "warn" for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "period": self.period,
            "lag_period": self.lag_period,
            "significance": self.significance,
            "checks": [c.to_dict() for c in self.checks],
        }


def delta_regressions(
    data,
    characteristics: tuple[str, ...] = ("ses",),
    *,
    lag: int = 1,
    cluster: str = "school_id",
    significance: float = SIGNIFICANCE_DEFAULT,
) -> DiagnosticReport:
    """One-period score change regressed on each characteristic.

    A slope near zero (relative to the level regression of the current score
    on the same characteristic) says growth is balanced on that
    characteristic. Slopes significant at ``significance`` get flag "warn".
    """
    frame = _frame(data)
    cur = _current_label(data)
    checks = []
    lag_label = None
    for characteristic in characteristics:
        fit, sub, lag_label = _change_fit(frame, characteristic, cur, lag, cluster)
        if fit is None:
            raise InsufficientData(
                f"not enough complete rows to regress the score change on "
                f"{characteristic!r}"
            )
        alpha = fit.coef(characteristic)
        se = fit.se(characteristic)
        level = ols_fit(
            sub,
            VariableSpec(avg_score_column(cur), (characteristic,), cluster),
            compute_covariance=False,
        ).coef(characteristic)
        t, p = _two_sided_p(alpha, se)
        reduction = 100.0 * (1.0 - alpha / level) if level != 0 else None
        checks.append(
            DriftCheck(
                characteristic=characteristic,
                alpha_hat=alpha,
                se=se,
                t_stat=t,
                p_value=p,
                level_coefficient=level,
                reduction_pct=reduction,
                n_obs=fit.n_obs,
                flag="warn" if p < significance else "pass",
            )
        )
    return DiagnosticReport(
        checks=tuple(checks), significance=significance, period=cur,
        lag_period=lag_label,
    )


@dataclass(frozen=True)
class PathPoint:
    tau: int
    label: str
    alpha_hat: float
    se: float
    n_obs: int


def delta_path(
    data,
    *,
    characteristic: str = "ses",
    cluster: str = "school_id",
) -> tuple[PathPoint, ...]:
    """Change-on-characteristic slope at every available lag depth.

    The tau = 1 point coincides with the ``delta_regressions`` slope for the
    same characteristic. A linear profile in tau is the signature of drift
    with a constant per-period loading on the characteristic.
    """
    frame = _frame(data)
    cur = _current_label(data)
    cur_index = PERIOD_LABELS.index(cur)
    points = []
    for tau in range(1, cur_index + 1):
        fit, _, lag_label = _change_fit(frame, characteristic, cur, tau, cluster)
        if fit is None:
            continue
        points.append(
            PathPoint(
                tau=tau,
                label=lag_label,
                alpha_hat=fit.coef(characteristic),
                se=fit.se(characteristic),
                n_obs=fit.n_obs,
            )
        )
    if not points:
        raise InsufficientData("no lag depth has enough complete rows")
    return tuple(points)


@dataclass(frozen=True)
class TransitionVarianceRow:
    """Variance bookkeeping of one ability transition, from ground truth.

    When drift is orthogonal to current ability (reverse-time noise),
    Cov(drift, previous ability) = -Var(drift) and the previous ability's
    variance exceeds the current one by Var(drift). The two residuals below
    measure departures from those equalities; drift that loads on current
    ability moves both away from zero.
    """

    label: str
    cov_drift_lag: float
    var_drift: float
    variance_gap: float
    n_obs: int

    @property
    def forecast_residual(self) -> float:
        # Cov(drift, prev) + Var(drift)
        return self.cov_drift_lag + self.var_drift

    @property
    def variance_drop_residual(self) -> float:
        # (Var(prev) - Var(cur)) - Var(drift); variance_gap is
        # Var(cur) - Var(prev) - Var(drift), which always equals 2 Cov
        return -self.variance_gap - 2.0 * self.var_drift

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "cov_drift_lag": self.cov_drift_lag,
            "var_drift": self.var_drift,
            "variance_gap": self.variance_gap,
            "forecast_residual": self.forecast_residual,
            "variance_drop_residual": self.variance_drop_residual,
            "n_obs": self.n_obs,
        }


def variance_implication_check(truth) -> tuple[TransitionVarianceRow, ...]:
    """Check drift variance identities on simulated ground truth.

    Accepts a SyntheticPanel or its truth frame. Needs the per-period ability
    columns ``s_<label>`` and per-transition drift columns ``delta_<label>``;
    raises NoTruthColumns otherwise.
    """
    frame = getattr(truth, "truth", truth)
    if not isinstance(frame, pd.DataFrame):
        raise NoTruthColumns("expected a SyntheticPanel or a truth frame")
    ability_labels = [
        label for label in PERIOD_LABELS if f"s_{label}" in frame.columns
    ]
    drift_labels = [
        label for label in PERIOD_LABELS if f"delta_{label}" in frame.columns
    ]
    if len(ability_labels) < 2 or not drift_labels:
        raise NoTruthColumns(
            "truth frame lacks per-period ability and drift columns"
        )
    rows = []
    for label in drift_labels:
        position = PERIOD_LABELS.index(label)
        previous = PERIOD_LABELS[position - 1]
        if previous not in ability_labels or label not in ability_labels:
            continue
        sub = frame[[f"s_{previous}", f"s_{label}", f"delta_{label}"]].dropna()
        s_prev = sub[f"s_{previous}"].to_numpy()
        s_cur = sub[f"s_{label}"].to_numpy()
        drift = sub[f"delta_{label}"].to_numpy()
        var_drift = float(np.var(drift, ddof=1))
        cov = float(np.cov(drift, s_prev, ddof=1)[0, 1])
        gap = (
            float(np.var(s_cur, ddof=1))
            - float(np.var(s_prev, ddof=1))
            - var_drift
        )
        rows.append(
            TransitionVarianceRow(
                label=label,
                cov_drift_lag=cov,
                var_drift=var_drift,
                variance_gap=gap,
                n_obs=len(sub),
            )
        )
    if not rows:
        raise NoTruthColumns("no transition has both ability and drift columns")
    return tuple(rows)
