"""Synthetic data-generating process with full ground truth.

Students carry a latent ability path over a half-year grade grid. The current
(grade-5 end) ability is delta*SES + u with u ~ N(0, sigma2_u); earlier
periods are built backward through a configurable drift law. Each period's
test emits an unbiased noisy signal (ability plus independent Gaussian error),
and the reported score is the posterior-mean (Kelley) shrinkage of that signal
toward its population mean with factor lambda_tilde. The outcome is the linear
long-regression equation: beta*SES + gamma*ability + e, where e may load on
the current drift (teacher_drift_weight), on a school random effect, and on
independent noise. Every draw is Gaussian, so the closed-form moment algebra
used for verification is exact.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .core_model import PERIOD_LABELS, PanelDataset
from .errors import (
    InvalidConfig,
    LambdaOutOfRange,
    NumericFallbackWarning,
    UnsupportedDriftLaw,
)

DRIFT_KINDS = ("constant", "ses_linked", "ability_linked", "noise", "composite")


@dataclass(frozen=True)
class DriftLaw:
    """Per-transition ability drift Delta entering each period after the first.

    kind "constant": Delta = constant. kind "ses_linked": Delta =
    ses_coefficient * SES. kind "ability_linked": Delta = ability_coefficient *
    u, where u is the CURRENT period's ability residual; this makes the
    lag-correlation profile Cov[u_t, u_{t-tau}]/Var[u_t] = 1 - b*tau exactly
    linear in tau. kind "noise": Delta ~ N(0, noise_variance), drawn
    independently per transition and student. kind "composite": the sum of all
    four components.
    """

    kind: str
    constant: float = 0.0
    ses_coefficient: float = 0.0
    ability_coefficient: float = 0.0
    noise_variance: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in DRIFT_KINDS:
            raise InvalidConfig(f"unknown drift kind {self.kind!r}; use one of {DRIFT_KINDS}")
        if self.noise_variance < 0:
            raise InvalidConfig("drift noise_variance must be nonnegative")
        active = {
            "constant": self.constant,
            "ses_linked": self.ses_coefficient,
            "ability_linked": self.ability_coefficient,
            "noise": self.noise_variance,
        }
        if self.kind != "composite":
            stray = [
                name
                for name, value in active.items()
                if name != self.kind and value != 0.0
            ]
            if stray:
                raise InvalidConfig(
                    f"drift kind {self.kind!r} does not use parameters {stray}"
                )

    @classmethod
    def of_constant(cls, value: float) -> "DriftLaw":
        return cls(kind="constant", constant=value)

    @classmethod
    def of_ses_linked(cls, coefficient: float) -> "DriftLaw":
        return cls(kind="ses_linked", ses_coefficient=coefficient)

    @classmethod
    def of_ability_linked(cls, coefficient: float) -> "DriftLaw":
        return cls(kind="ability_linked", ability_coefficient=coefficient)

    @classmethod
    def of_noise(cls, variance: float) -> "DriftLaw":
        return cls(kind="noise", noise_variance=variance)

    @classmethod
    def of_composite(
        cls,
        *,
        constant: float = 0.0,
        ses_coefficient: float = 0.0,
        ability_coefficient: float = 0.0,
        noise_variance: float = 0.0,
    ) -> "DriftLaw":
        return cls(
            kind="composite",
            constant=constant,
            ses_coefficient=ses_coefficient,
            ability_coefficient=ability_coefficient,
            noise_variance=noise_variance,
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "constant": self.constant,
            "ses_coefficient": self.ses_coefficient,
            "ability_coefficient": self.ability_coefficient,
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DriftLaw":
        if not isinstance(payload, dict) or "kind" not in payload:
            raise InvalidConfig("drift_law must be an object with a 'kind' field")
        known = {"kind", "constant", "ses_coefficient", "ability_coefficient", "noise_variance"}
        unknown = set(payload) - known
        if unknown:
            raise InvalidConfig(f"unknown drift_law fields: {sorted(unknown)}")
        return cls(**payload)


@dataclass(frozen=True)
class DgpConfig:
    """True structural parameters defining a synthetic population.

    sigma2_m may be a single variance (applied to every period) or one value
    per period in chronological order. periods = T places the panel on the
    LAST T cells of the grade grid, so the current period is always grade-5
    end term. The implied current-period reliability is
    sigma2_u / (sigma2_u + sigma2_m[-1]).
    """

    beta: float
    gamma: float
    delta: float
    lambda_tilde: float
    sigma2_u: float
    sigma2_m: tuple[float, ...]
    sigma2_e: float
    n_students: int
    n_clusters: int
    periods: int
    drift_law: DriftLaw
    teacher_drift_weight: float = 0.0
    cluster_effect_sd: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.drift_law, DriftLaw):
            raise InvalidConfig("drift_law must be a DriftLaw")
        if not isinstance(self.periods, int) or not 2 <= self.periods <= len(PERIOD_LABELS):
            raise InvalidConfig(
                f"periods must be an integer in 2..{len(PERIOD_LABELS)}, got {self.periods}"
            )
        sigma2_m = self.sigma2_m
        if np.isscalar(sigma2_m):
            sigma2_m = (float(sigma2_m),) * self.periods
        else:
            sigma2_m = tuple(float(v) for v in sigma2_m)
        object.__setattr__(self, "sigma2_m", sigma2_m)
        if len(sigma2_m) != self.periods:
            raise InvalidConfig(
                f"sigma2_m must have one value per period ({self.periods}), got {len(sigma2_m)}"
            )
        if not 0.0 < self.lambda_tilde <= 1.0:
            raise InvalidConfig(f"lambda_tilde must be in (0, 1], got {self.lambda_tilde}")
        if self.sigma2_u <= 0:
            raise InvalidConfig("sigma2_u must be strictly positive")
        if any(v < 0 for v in sigma2_m):
            raise InvalidConfig("sigma2_m values must be nonnegative")
        if self.sigma2_e < 0:
            raise InvalidConfig("sigma2_e must be nonnegative")
        if self.cluster_effect_sd < 0:
            raise InvalidConfig("cluster_effect_sd must be nonnegative")
        if self.n_students < 2:
            raise InvalidConfig("n_students must be at least 2")
        if not 2 <= self.n_clusters <= self.n_students:
            raise InvalidConfig("n_clusters must be in 2..n_students")

    @property
    def period_labels(self) -> tuple[str, ...]:
        return PERIOD_LABELS[len(PERIOD_LABELS) - self.periods :]

    @property
    def sigma2_m_current(self) -> float:
        return self.sigma2_m[-1]

    def sigma2_m_at_lag(self, tau: int) -> float:
        return self.sigma2_m[self.periods - 1 - tau]

    def lambda_reliability(self) -> float:
        """Current-period reliability sigma2_u / (sigma2_u + sigma2_m)."""
        return self.sigma2_u / (self.sigma2_u + self.sigma2_m_current)

    def unconditional_signal_reliability(self) -> float:
        """Signal variance share of the current signal, SES included.

        This is the shrinkage factor a correctly specified posterior-mean
        score would use; setting lambda_tilde to it makes the score error
        uncorrelated with the score itself.
        """
        var_ability = self.delta**2 + self.sigma2_u
        return var_ability / (var_ability + self.sigma2_m_current)

    def to_dict(self) -> dict:
        payload = dataclasses.asdict(self)
        payload["sigma2_m"] = list(self.sigma2_m)
        payload["drift_law"] = self.drift_law.to_dict()
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "DgpConfig":
        if not isinstance(payload, dict):
            raise InvalidConfig("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise InvalidConfig(f"unknown config fields: {sorted(unknown)}")
        missing = {
            f.name
            for f in dataclasses.fields(cls)
            if f.default is dataclasses.MISSING and f.name not in payload
        }
        if missing:
            raise InvalidConfig(f"missing config fields: {sorted(missing)}")
        payload = dict(payload)
        payload["drift_law"] = DriftLaw.from_dict(payload["drift_law"])
        try:
            return cls(**payload)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def from_json(cls, path) -> "DgpConfig":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config file is not valid JSON: {exc}") from None
        return cls.from_dict(payload)


@dataclass(frozen=True)
class SyntheticPanel:
    """A PanelDataset plus the hidden truth behind it.

    ``truth`` has one row per student: ability s_<label>, signal
    signal_<label>, measurement error m_<label>, SES-orthogonal residual
    u_<label> per period, drift delta_<label> for each period after the first
    (the drift of the transition INTO that period), and the outcome error e.
    """

    panel: PanelDataset
    truth: pd.DataFrame = field(repr=False)
    config: DgpConfig

    def export(self, base_path) -> tuple[Path, Path]:
        """Write the panel CSV and its `_truth.csv` sidecar; returns both paths."""
        base = Path(base_path)
        panel_path = base if base.suffix == ".csv" else base.with_suffix(".csv")
        truth_path = panel_path.with_name(panel_path.stem + "_truth.csv")
        self.panel.to_csv(panel_path)
        self.truth.to_csv(truth_path, index=False, na_rep="", encoding="utf-8")
        return panel_path, truth_path


def kelley_score(signal, population_mean, lambda_tilde):
    """Posterior-mean score: (1 - lambda_tilde)*mean + lambda_tilde*signal."""
    if not 0.0 <= lambda_tilde <= 1.0:
        raise LambdaOutOfRange(f"lambda_tilde must be in [0, 1], got {lambda_tilde}")
    return (1.0 - lambda_tilde) * population_mean + lambda_tilde * np.asarray(signal, dtype=float)


def _drift_mean(config: DgpConfig, tau: int) -> float:
    """Population mean of ability (and signal) tau periods before current."""
    return -config.drift_law.constant * tau


def _ses_loading(config: DgpConfig, tau: int) -> float:
    """SES loading of ability tau periods before current."""
    return config.delta - config.drift_law.ses_coefficient * tau


def simulate_panel(config: DgpConfig, seed_sequence: np.random.SeedSequence | None = None) -> SyntheticPanel:
    """Draw one synthetic panel; deterministic given (config, seed).

    SES is a standard normal draw (used as-is for both ses and ses_raw), the
    current ability is delta*SES + u, earlier abilities follow by subtracting
    the drift of each transition, signals add independent N(0, sigma2_m)
    errors, and scores shrink signals toward their population means with
    factor lambda_tilde. Students are assigned to schools round-robin.
    """
    if seed_sequence is None:
        seed_sequence = np.random.SeedSequence(config.seed)
    rng = np.random.Generator(np.random.Philox(seed_sequence))
    n = config.n_students
    T = config.periods
    law = config.drift_law

    ses = rng.standard_normal(n)
    u_current = rng.normal(0.0, np.sqrt(config.sigma2_u), n)

    # Drift of the transition into period p (chronological index 1..T-1).
    drifts: list[np.ndarray] = []
    for _ in range(1, T):
        delta_j = np.full(n, law.constant, dtype=float)
        if law.ses_coefficient != 0.0:
            delta_j = delta_j + law.ses_coefficient * ses
        if law.ability_coefficient != 0.0:
            delta_j = delta_j + law.ability_coefficient * u_current
        if law.noise_variance > 0.0:
            delta_j = delta_j + rng.normal(0.0, np.sqrt(law.noise_variance), n)
        drifts.append(delta_j)

    ability = [np.empty(0)] * T
    ability[T - 1] = config.delta * ses + u_current
    for p in range(T - 2, -1, -1):
        ability[p] = ability[p + 1] - drifts[p]

    errors = [rng.normal(0.0, np.sqrt(config.sigma2_m[p]), n) for p in range(T)]
    signals = [ability[p] + errors[p] for p in range(T)]
    scores = [
        kelley_score(signals[p], _drift_mean(config, T - 1 - p), config.lambda_tilde)
        for p in range(T)
    ]

    school = np.arange(n) % config.n_clusters
    cluster_effect = rng.normal(0.0, config.cluster_effect_sd, config.n_clusters)
    e = (
        config.teacher_drift_weight * drifts[T - 2]
        + cluster_effect[school]
        + rng.normal(0.0, np.sqrt(config.sigma2_e), n)
    )
    outcome = config.beta * ses + config.gamma * ability[T - 1] + e

    labels = config.period_labels
    base = pd.DataFrame(
        {
            "student_id": np.arange(n),
            "school_id": school,
            "cohort": np.full(n, "sim"),
            "ses": ses,
            "ses_raw": ses,
            "outcome": outcome,
        }
    )
    panel = PanelDataset.from_analysis_columns(
        base, {labels[p]: scores[p] for p in range(T)}
    )

    truth_cols: dict[str, np.ndarray] = {"student_id": np.arange(n)}
    for p, label in enumerate(labels):
        tau = T - 1 - p
        truth_cols[f"s_{label}"] = ability[p]
        truth_cols[f"signal_{label}"] = signals[p]
        truth_cols[f"m_{label}"] = errors[p]
        truth_cols[f"u_{label}"] = (
            ability[p] - _ses_loading(config, tau) * ses - _drift_mean(config, tau)
        )
    for p in range(1, T):
        truth_cols[f"delta_{labels[p]}"] = drifts[p - 1]
    truth_cols["e"] = e
    truth = pd.DataFrame(truth_cols)
    return SyntheticPanel(panel=panel, truth=truth, config=config)


@dataclass(frozen=True)
class PopulationMoments:
    """Analytic (or large-N numeric) population moments implied by a config.

    Keys of the per-lag mappings are tau = 0 (current period) .. T-1. e_star
    denotes the outcome error after removing its SES projection; beta_eff and
    gamma_eff are the coefficients of the equivalent model with that
    orthogonalized error.
    """

    lambda_: float
    ses_loading_by_tau: dict[int, float]
    sigma2_u_by_tau: dict[int, float]
    cov_u_by_tau: dict[int, float]
    v_by_tau: dict[int, float]
    cov_y_u_by_tau: dict[int, float]
    cov_e_ses: float
    cov_e_delta: float
    sigma2_delta_orth: float
    sigma2_delta_total: float
    b_pi_by_tau: dict[int, float]
    b_gamma: float
    beta_eff: float
    gamma_eff: float
    numeric: bool


def _closed_moments(config: DgpConfig) -> PopulationMoments:
    law = config.drift_law
    a = law.ses_coefficient
    b = law.ability_coefficient
    s2_eta = law.noise_variance
    s2_u = config.sigma2_u
    w = config.teacher_drift_weight
    gamma = config.gamma
    T = config.periods

    ses_loading = {tau: config.delta - a * tau for tau in range(T)}
    sigma2_u = {tau: (1.0 - b * tau) ** 2 * s2_u + tau * s2_eta for tau in range(T)}
    cov_u = {tau: (1.0 - b * tau) * s2_u for tau in range(T)}
    v = {tau: sigma2_u[tau] + config.sigma2_m_at_lag(tau) for tau in range(T)}

    cov_e_u = {0: w * b * s2_u}
    for tau in range(1, T):
        cov_e_u[tau] = w * (b * cov_u[tau] - s2_eta)
    cov_y_u = {tau: gamma * cov_u[tau] + cov_e_u[tau] for tau in range(T)}

    sigma2_delta_orth = b**2 * s2_u + s2_eta
    lambda_ = s2_u / v[0] if v[0] > 0 else float("nan")
    b_pi = {tau: cov_u[tau] / s2_u for tau in range(T)}
    cov_y_u0 = cov_y_u[0]
    b_gamma = 1.0 - (w * sigma2_delta_orth) / cov_y_u0 if cov_y_u0 != 0 else float("nan")
    return PopulationMoments(
        lambda_=lambda_,
        ses_loading_by_tau=ses_loading,
        sigma2_u_by_tau=sigma2_u,
        cov_u_by_tau=cov_u,
        v_by_tau=v,
        cov_y_u_by_tau=cov_y_u,
        cov_e_ses=w * a,
        cov_e_delta=w * sigma2_delta_orth,
        sigma2_delta_orth=sigma2_delta_orth,
        sigma2_delta_total=a**2 + sigma2_delta_orth,
        b_pi_by_tau=b_pi,
        b_gamma=b_gamma,
        beta_eff=config.beta + w * a,
        gamma_eff=gamma + w * b,
        numeric=False,
    )


def _sample_cov(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.cov(x, y, ddof=1)[0, 1])


def _numeric_moments(config: DgpConfig, n_students: int, seed_offset: int) -> PopulationMoments:
    big = dataclasses.replace(
        config,
        n_students=n_students,
        n_clusters=max(config.n_clusters, 2),
        seed=config.seed + seed_offset,
    )
    sim = simulate_panel(big)
    truth = sim.truth
    panel = sim.panel.frame
    T = config.periods
    labels = config.period_labels
    ses = panel["ses"].to_numpy()
    y = panel["outcome"].to_numpy()
    e = truth["e"].to_numpy()
    var_ses = float(np.var(ses, ddof=1))

    u = {T - 1 - p: truth[f"u_{labels[p]}"].to_numpy() for p in range(T)}
    s2_u = {tau: float(np.var(u[tau], ddof=1)) for tau in range(T)}
    cov_u = {tau: _sample_cov(u[0], u[tau]) for tau in range(T)}
    v = {tau: s2_u[tau] + config.sigma2_m_at_lag(tau) for tau in range(T)}

    cov_e_ses = _sample_cov(e, ses)
    e_star = e - (cov_e_ses / var_ses) * ses
    delta_cur = truth[f"delta_{labels[-1]}"].to_numpy()
    cov_d_ses = _sample_cov(delta_cur, ses)
    delta_orth = delta_cur - (cov_d_ses / var_ses) * ses
    cov_y_u = {tau: _sample_cov(y, u[tau]) for tau in range(T)}

    s = {T - 1 - p: truth[f"s_{labels[p]}"].to_numpy() for p in range(T)}
    ses_loading = {tau: _sample_cov(s[tau], ses) / var_ses for tau in range(T)}

    sigma2_delta_orth = float(np.var(delta_orth, ddof=1))
    cov_e_delta = _sample_cov(e_star, delta_orth)
    lambda_ = s2_u[0] / v[0]
    b_gamma = 1.0 - cov_e_delta / cov_y_u[0] if cov_y_u[0] != 0 else float("nan")
    return PopulationMoments(
        lambda_=lambda_,
        ses_loading_by_tau=ses_loading,
        sigma2_u_by_tau=s2_u,
        cov_u_by_tau=cov_u,
        v_by_tau=v,
        cov_y_u_by_tau=cov_y_u,
        cov_e_ses=cov_e_ses,
        cov_e_delta=cov_e_delta,
        sigma2_delta_orth=sigma2_delta_orth,
        sigma2_delta_total=float(np.var(delta_cur, ddof=1)),
        b_pi_by_tau={tau: cov_u[tau] / s2_u[0] for tau in range(T)},
        b_gamma=b_gamma,
        beta_eff=config.beta + _sample_cov(e, ses) / var_ses,
        gamma_eff=config.gamma + (_sample_cov(e_star, u[0]) / s2_u[0] if s2_u[0] > 0 else 0.0),
        numeric=True,
    )


def dgp_moments(
    config: DgpConfig,
    *,
    allow_numeric: bool = True,
    numeric_students: int = 2_000_000,
) -> PopulationMoments:
    """Population moments implied by a config.

    The four pure drift laws have exact closed forms. Composite laws have no
    closed-form drift decomposition here; with ``allow_numeric`` they fall
    back to sample moments from one large simulated panel (with a
    NumericFallbackWarning), otherwise UnsupportedDriftLaw is raised.
    """
    if config.drift_law.kind != "composite":
        return _closed_moments(config)
    if not allow_numeric:
        raise UnsupportedDriftLaw(
            "composite drift laws have no closed-form moments; "
            "pass allow_numeric=True to use large-N numeric moments"
        )
    warnings.warn(
        f"composite drift law: using numeric moments from one panel of "
        f"{numeric_students} students",
        NumericFallbackWarning,
        stacklevel=2,
    )
    return _numeric_moments(config, numeric_students, seed_offset=982_451_653)
