"""Monte Carlo verification of the closed-form bias algebra.

``closed_form_predictions`` turns a DgpConfig into probability limits for
every estimand the strategies produce, using the population moments from
``dgp_moments``. ``mc_run`` simulates many panels, runs the strategies on
each, and compares Monte Carlo means against those limits in units of the
Monte Carlo standard error. A mean more than ``band`` standard errors from
its limit marks the estimand as out of band.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ContaminaError, InvalidConfig, McReplicationError
from .simulate import DgpConfig, dgp_moments, simulate_panel
from .strategies import (
    _clip_reliability,
    eiv_correct,
    eiv_fs_strategy,
    eiv_th_strategy,
    iv_strategy,
    ols_strategy,
)

CORE_ESTIMANDS = (
    "beta_m",
    "gamma_m",
    "delta_m",
    "pi",
    "theta0",
    "theta1",
    "beta_iv",
    "gamma_iv",
    "lambda_fs",
    "beta_eiv_fs",
    "gamma_eiv_fs",
)
TH_ESTIMANDS = ("lambda_th", "beta_eiv_th", "gamma_eiv_th", "th_fit_r2")


def _th_supported(config: DgpConfig, degree: int, min_lags: int) -> bool:
    return config.periods - 1 >= max(min_lags, degree + 2)


def closed_form_predictions(
    config: DgpConfig,
    *,
    degree: int = 1,
    eval_tau: float = 0.0,
    min_lags: int = 3,
) -> dict[str, float | None]:
    """Probability limits of the strategy estimands under a config.

    Exact for the pure drift laws; composite laws use large-N numeric moments
    (see dgp_moments). th_fit_r2 has no population prediction and maps to
    None, as do the test-history estimands when the panel is too short to
    support the forecast.
    """
    m = dgp_moments(config)
    lt = config.lambda_tilde
    delta_cur = m.ses_loading_by_tau[0]
    beta_total = m.beta_eff + config.gamma * delta_cur

    delta_m = lt * delta_cur
    gamma_m = m.cov_y_u_by_tau[0] / (lt * m.v_by_tau[0])
    beta_m = beta_total - gamma_m * delta_m

    pi = m.cov_u_by_tau[1] / m.v_by_tau[1]
    theta1 = m.cov_y_u_by_tau[1] / (lt * m.v_by_tau[1])
    theta0 = beta_total - theta1 * lt * m.ses_loading_by_tau[1]
    gamma_iv = m.cov_y_u_by_tau[1] / (lt * m.cov_u_by_tau[1])
    beta_iv = beta_total - gamma_iv * delta_m

    def pi_prime(tau: int) -> float:
        return m.cov_u_by_tau[tau] / m.v_by_tau[0]

    lambda_fs, _ = _clip_reliability(pi_prime(1))
    beta_eiv_fs, gamma_eiv_fs = eiv_correct(beta_m, gamma_m, delta_m, lambda_fs)

    predictions: dict[str, float | None] = {
        "beta_m": beta_m,
        "gamma_m": gamma_m,
        "delta_m": delta_m,
        "pi": pi,
        "theta0": theta0,
        "theta1": theta1,
        "beta_iv": beta_iv,
        "gamma_iv": gamma_iv,
        "lambda_fs": lambda_fs,
        "beta_eiv_fs": beta_eiv_fs,
        "gamma_eiv_fs": gamma_eiv_fs,
        "lambda_th": None,
        "beta_eiv_th": None,
        "gamma_eiv_th": None,
        "th_fit_r2": None,
    }
    if _th_supported(config, degree, min_lags):
        taus = np.arange(1, config.periods, dtype=float)
        values = np.array([pi_prime(int(t)) for t in taus])
        coefs = np.polynomial.polynomial.polyfit(taus, values, degree)
        lambda_th, _ = _clip_reliability(
            float(np.polynomial.polynomial.polyval(eval_tau, coefs))
        )
        beta_eiv_th, gamma_eiv_th = eiv_correct(beta_m, gamma_m, delta_m, lambda_th)
        predictions["lambda_th"] = lambda_th
        predictions["beta_eiv_th"] = beta_eiv_th
        predictions["gamma_eiv_th"] = gamma_eiv_th
    return predictions


@dataclass(frozen=True)
class EstimandSummary:
    name: str
    mean: float
    sd: float
    mc_se: float
    predicted: float | None
    z: float | None
    within_band: bool | None

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "sd": self.sd,
            "mc_se": self.mc_se,
            "predicted": self.predicted,
            "z": self.z,
            "within_band": self.within_band,
        }


@dataclass(frozen=True)
class McSummary:
    estimands: dict[str, EstimandSummary]
    n_replications: int
    band: float
    degree: int
    reportable: bool
    runtime_seconds: float

    @property
    def all_within_band(self) -> bool:
        return all(
            s.within_band for s in self.estimands.values() if s.within_band is not None
        )

    def out_of_band(self) -> list[str]:
        return [
            name
            for name, s in self.estimands.items()
            if s.within_band is False
        ]

    def to_dict(self) -> dict:
        return {
            "n_replications": self.n_replications,
            "band": self.band,
            "degree": self.degree,
            "reportable": self.reportable,
            "runtime_seconds": self.runtime_seconds,
            "all_within_band": self.all_within_band,
            "estimands": {
                name: s.to_dict() for name, s in self.estimands.items()
            },
        }


@dataclass(frozen=True)
class McResult:
    summary: McSummary
    draws: pd.DataFrame
    predictions: dict[str, float | None]


def _replication_row(panel, degree: int, min_lags: int, want_th: bool) -> dict[str, float]:
    ols = ols_strategy(panel, se_method="none")
    iv = iv_strategy(panel, se_method="none")
    fs = eiv_fs_strategy(panel, se_method="none")
    row = {
        "beta_m": ols.beta_hat,
        "gamma_m": ols.gamma_hat,
        "delta_m": ols.details["delta_m"],
        "pi": iv.details["pi_hat"],
        "theta0": iv.details["theta0_hat"],
        "theta1": iv.details["theta1_hat"],
        "beta_iv": iv.beta_hat,
        "gamma_iv": iv.gamma_hat,
        "lambda_fs": fs.lambda_hat,
        "beta_eiv_fs": fs.beta_hat,
        "gamma_eiv_fs": fs.gamma_hat,
    }
    if want_th:
        th = eiv_th_strategy(panel, degree=degree, se_method="none", min_lags=min_lags)
        row.update(
            {
                "lambda_th": th.lambda_hat,
                "beta_eiv_th": th.beta_hat,
                "gamma_eiv_th": th.gamma_hat,
                "th_fit_r2": th.details["fit_r2"],
            }
        )
    return row


def mc_run(
    config: DgpConfig,
    n_replications: int,
    estimands=None,
    *,
    degree: int = 1,
    band: float = 4.0,
    min_lags: int = 3,
    predictions: dict[str, float | None] | None = None,
) -> McResult:
    """Simulate, estimate, and compare means against closed-form limits.

    Replication r uses the seed stream (config.seed, spawn_key=(r,)), so any
    single replication can be reproduced in isolation. ``predictions``
    overrides the computed limits (for negative controls). Fewer than 30
    replications is allowed but marked not reportable.
    """
    if not isinstance(n_replications, int) or n_replications < 2:
        raise InvalidConfig(
            f"n_replications must be an integer >= 2, got {n_replications}"
        )
    th_ok = _th_supported(config, degree, min_lags)
    if estimands is None:
        names = list(CORE_ESTIMANDS) + (list(TH_ESTIMANDS) if th_ok else [])
    else:
        names = list(estimands)
        known = set(CORE_ESTIMANDS) | set(TH_ESTIMANDS)
        unknown = [n for n in names if n not in known]
        if unknown:
            raise InvalidConfig(f"unknown estimands: {unknown}")
        if not th_ok and any(n in TH_ESTIMANDS for n in names):
            raise InvalidConfig(
                "test-history estimands need periods - 1 >= "
                f"{max(min_lags, degree + 2)} lags"
            )
    want_th = any(n in TH_ESTIMANDS for n in names)

    if predictions is None:
        predictions = closed_form_predictions(config, degree=degree, min_lags=min_lags)

    start = time.perf_counter()
    values: dict[str, list[float]] = {name: [] for name in names}
    for replication in range(n_replications):
        seed_seq = np.random.SeedSequence(
            entropy=config.seed, spawn_key=(replication,)
        )
        try:
            sim = simulate_panel(config, seed_seq)
            row = _replication_row(sim.panel, degree, min_lags, want_th)
        except ContaminaError as exc:
            raise McReplicationError(replication, str(exc)) from exc
        for name in names:
            values[name].append(row[name])
    runtime = time.perf_counter() - start

    summaries: dict[str, EstimandSummary] = {}
    for name in names:
        draws = np.array(values[name], dtype=float)
        mean = float(draws.mean())
        sd = float(draws.std(ddof=1))
        mc_se = sd / np.sqrt(n_replications)
        predicted = predictions.get(name)
        if predicted is None:
            z = None
            within = None
        elif mc_se > 0:
            z = float((mean - predicted) / mc_se)
            within = bool(abs(z) <= band)
        else:
            z = 0.0 if mean == predicted else float("inf")
            within = bool(mean == predicted)
        summaries[name] = EstimandSummary(
            name=name, mean=mean, sd=sd, mc_se=float(mc_se),
            predicted=predicted, z=z, within_band=within,
        )

    draws_long = pd.DataFrame(
        {
            "estimand": np.repeat(names, n_replications),
            "replication": np.tile(np.arange(n_replications), len(names)),
            "value": np.concatenate([values[name] for name in names])
            if names
            else np.array([]),
        }
    )
    summary = McSummary(
        estimands=summaries,
        n_replications=n_replications,
        band=band,
        degree=degree,
        reportable=n_replications >= 30,
        runtime_seconds=runtime,
    )
    return McResult(summary=summary, draws=draws_long, predictions=dict(predictions))
