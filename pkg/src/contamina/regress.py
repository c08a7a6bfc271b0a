"""Deterministic linear-regression engine.

OLS solved through a QR decomposition (never normal equations), CR1
cluster-robust covariance, just-identified two-stage least squares, the
stacked joint-estimation device that yields cross-equation covariances, and a
delta method for smooth functionals of fitted coefficients. All operations are
pure functions of immutable inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular

from .core_model import PanelDataset, RegressionFit, VariableSpec
from .errors import (
    InsufficientData,
    RankDeficient,
    SingleCluster,
    WeakInstrument,
    WeakInstrumentWarning,
)

INTERCEPT = "intercept"

#: Singular values below this fraction of the largest are treated as zero.
RANK_TOLERANCE = 1e-10

#: First-stage coefficients below this magnitude raise WeakInstrument.
WEAK_INSTRUMENT_THRESHOLD = 1e-6

#: First-stage |t| below this only warns (roughly a first-stage F of 10).
WEAK_INSTRUMENT_WARN_T = 3.16


def _as_frame(data) -> pd.DataFrame:
    return data.frame if isinstance(data, PanelDataset) else data


def _complete_rows(frame: pd.DataFrame, columns: Sequence[str]) -> pd.DataFrame:
    mask = np.ones(len(frame), dtype=bool)
    for c in columns:
        mask &= frame[c].notna().to_numpy()
    return frame.loc[mask]


def _design(frame: pd.DataFrame, regressors: Sequence[str]) -> np.ndarray:
    n = len(frame)
    cols = [np.ones(n)]
    cols.extend(np.asarray(frame[r], dtype=float) for r in regressors)
    return np.column_stack(cols)


def _qr_solve(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least squares via QR; returns (coefficients, R factor)."""
    Q, R = np.linalg.qr(X)
    singular_values = np.linalg.svd(R, compute_uv=False)
    if singular_values[0] == 0.0 or (
        singular_values[-1] < RANK_TOLERANCE * singular_values[0]
    ):
        raise RankDeficient(
            "design matrix is rank deficient (collinear or constant regressor)"
        )
    beta = solve_triangular(R, Q.T @ y)
    return beta, R


def _bread_from_r(R: np.ndarray) -> np.ndarray:
    """(X'X)^-1 from the R factor of the design's QR decomposition."""
    r_inv = solve_triangular(R, np.eye(R.shape[0]))
    return r_inv @ r_inv.T


def cr1_factor(n_obs: int, n_params: int, n_clusters: int) -> float:
    """CR1 small-sample scale G/(G-1) * (N-1)/(N-k)."""
    if n_obs == n_params:
        return 1.0
    return (n_clusters / (n_clusters - 1)) * ((n_obs - 1) / (n_obs - n_params))


def clustered_covariance(
    design: np.ndarray,
    residuals: np.ndarray,
    cluster_ids: Sequence,
    *,
    bread: np.ndarray | None = None,
    correction: float | None = None,
) -> np.ndarray:
    """CR1 sandwich covariance, clustered on ``cluster_ids``.

    (X'X)^-1 [sum_g X_g'u_g u_g'X_g] (X'X)^-1, scaled by
    G/(G-1) * (N-1)/(N-k) unless ``correction`` overrides the scale. With one
    observation per cluster this equals the HC1 heteroskedasticity-robust
    matrix exactly.
    """
    design = np.asarray(design, dtype=float)
    residuals = np.asarray(residuals, dtype=float)
    codes, uniques = pd.factorize(np.asarray(cluster_ids))
    n_clusters = len(uniques)
    if n_clusters < 2:
        raise SingleCluster("cluster-robust covariance needs at least 2 clusters")
    n_obs, n_params = design.shape
    scores = design * residuals[:, None]
    order = np.argsort(codes, kind="stable")
    sorted_codes = codes[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(sorted_codes)) + 1))
    cluster_sums = np.add.reduceat(scores[order], starts, axis=0)
    meat = cluster_sums.T @ cluster_sums
    if bread is None:
        _, R = np.linalg.qr(design)
        bread = _bread_from_r(R)
    scale = cr1_factor(n_obs, n_params, n_clusters) if correction is None else correction
    cov = bread @ meat @ bread * scale
    return (cov + cov.T) / 2.0


def _finish_fit(
    names: tuple[str, ...],
    beta: np.ndarray,
    residuals: np.ndarray,
    y: np.ndarray,
    covariance: np.ndarray | None,
    n_clusters: int,
) -> RegressionFit:
    n_obs = y.size
    n_params = beta.size
    ssr = float(residuals @ residuals)
    df = n_obs - n_params
    residual_variance = ssr / df if df > 0 else 0.0
    tss = float(((y - y.mean()) ** 2).sum())
    if tss > 0.0:
        r_squared = 1.0 - ssr / tss
    else:
        r_squared = 1.0 if ssr <= 1e-12 else 0.0
    r_squared = min(1.0, max(0.0, r_squared))
    return RegressionFit(
        names=names,
        coefficients=dict(zip(names, (float(b) for b in beta))),
        covariance=covariance,
        residual_variance=residual_variance,
        r_squared=r_squared,
        n_obs=n_obs,
        n_clusters=n_clusters,
    )


def ols_fit(
    data,
    spec: VariableSpec,
    *,
    compute_covariance: bool = True,
    correction: float | None = None,
) -> RegressionFit:
    """OLS of the spec's outcome on its regressors plus an implicit intercept.

    Complete cases only; coefficients minimize the sum of squared residuals;
    the covariance is the CR1 cluster-robust sandwich on the spec's cluster
    column. Raises InsufficientData with fewer rows than regressors plus one,
    RankDeficient on collinear designs, SingleCluster when covariance is
    requested with a single cluster.
    """
    frame = _as_frame(data)
    spec.require_columns(frame)
    sub = _complete_rows(frame, spec.all_columns)
    names = (INTERCEPT, *spec.regressor_names)
    n_params = len(names)
    if len(sub) < n_params:
        raise InsufficientData(
            f"need at least {n_params} complete rows, have {len(sub)}"
        )
    X = _design(sub, spec.regressor_names)
    y = np.asarray(sub[spec.outcome_name], dtype=float)
    beta, R = _qr_solve(X, y)
    residuals = y - X @ beta
    clusters = sub[spec.cluster_name].to_numpy()
    n_clusters = int(pd.factorize(clusters)[1].size)
    covariance = None
    if compute_covariance:
        if len(sub) == n_params:
            covariance = np.zeros((n_params, n_params))
        else:
            covariance = clustered_covariance(
                X, residuals, clusters, bread=_bread_from_r(R), correction=correction
            )
    return _finish_fit(names, beta, residuals, y, covariance, n_clusters)


def tsls_fit(
    data,
    outcome: str,
    endogenous: str,
    instrument: str,
    exogenous: Sequence[str] = (),
    *,
    cluster_name: str = "school_id",
    weak_threshold: float = WEAK_INSTRUMENT_THRESHOLD,
    compute_covariance: bool = True,
    correction: float | None = None,
) -> RegressionFit:
    """Just-identified two-stage least squares with one endogenous regressor.

    First stage regresses the endogenous variable on the exogenous regressors
    and the instrument; the second stage replaces the endogenous column with
    its first-stage fit. The coefficient on the endogenous regressor equals the
    reduced-form coefficient divided by the first-stage coefficient (exact
    ratio identity). Residuals for the sandwich use the original, not fitted,
    endogenous column. A first-stage coefficient below ``weak_threshold`` in
    magnitude raises WeakInstrument; a usable but weak first stage emits
    WeakInstrumentWarning. The reported r_squared is clamped into [0, 1].
    """
    frame = _as_frame(data)
    exogenous = tuple(exogenous)
    columns = (outcome, endogenous, instrument, *exogenous, cluster_name)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise KeyError(f"columns not in dataset: {missing}")
    sub = _complete_rows(frame, columns)
    names = (INTERCEPT, *exogenous, endogenous)
    n_params = len(names)
    if len(sub) < n_params + 1:
        raise InsufficientData(
            f"need at least {n_params + 1} complete rows, have {len(sub)}"
        )

    fs_regressors = (*exogenous, instrument)
    X_fs = _design(sub, fs_regressors)
    endog = np.asarray(sub[endogenous], dtype=float)
    fs_beta, fs_R = _qr_solve(X_fs, endog)
    pi_hat = float(fs_beta[-1])
    if abs(pi_hat) < weak_threshold:
        raise WeakInstrument(
            f"first-stage coefficient {pi_hat:.3e} below threshold {weak_threshold:.1e}"
        )
    clusters = sub[cluster_name].to_numpy()
    fs_residuals = endog - X_fs @ fs_beta
    fs_cov = clustered_covariance(
        X_fs, fs_residuals, clusters, bread=_bread_from_r(fs_R), correction=correction
    )
    fs_se = float(np.sqrt(max(fs_cov[-1, -1], 0.0)))
    if fs_se > 0.0 and abs(pi_hat) / fs_se < WEAK_INSTRUMENT_WARN_T:
        warnings.warn(
            f"weak first stage: coefficient {pi_hat:.4f}, |t| = {abs(pi_hat) / fs_se:.2f}",
            WeakInstrumentWarning,
            stacklevel=2,
        )

    fitted = X_fs @ fs_beta
    X_hat = np.column_stack([np.ones(len(sub)), *(np.asarray(sub[c], dtype=float) for c in exogenous), fitted])
    y = np.asarray(sub[outcome], dtype=float)
    beta, R_hat = _qr_solve(X_hat, y)
    X_orig = _design(sub, (*exogenous, endogenous))
    residuals = y - X_orig @ beta
    n_clusters = int(pd.factorize(clusters)[1].size)
    covariance = None
    if compute_covariance:
        covariance = clustered_covariance(
            X_hat, residuals, clusters, bread=_bread_from_r(R_hat), correction=correction
        )
    return _finish_fit(names, beta, residuals, y, covariance, n_clusters)


@dataclass(frozen=True)
class StackedSystem:
    """A list of (VariableSpec, tag) equations estimated jointly.

    The dataset is conceptually replicated once per equation; each equation's
    regressors are interacted with its equation dummy, which is what the
    block-diagonal design below implements. All equations must refer to the
    same underlying dataset and share the cluster column.
    """

    equations: tuple[tuple[VariableSpec, str], ...]
    replication_factor: int = field(default=0)

    def __post_init__(self) -> None:
        equations = tuple((spec, str(tag)) for spec, tag in self.equations)
        object.__setattr__(self, "equations", equations)
        object.__setattr__(self, "replication_factor", len(equations))
        tags = [tag for _, tag in equations]
        if len(set(tags)) != len(tags):
            raise ValueError(f"equation tags must be unique: {tags}")
        if not equations:
            raise ValueError("stacked system needs at least one equation")
        clusters = {spec.cluster_name for spec, _ in equations}
        if len(clusters) != 1:
            raise ValueError("all equations must share one cluster column")


def stacked_fit(
    data,
    system: StackedSystem,
    *,
    compute_covariance: bool = True,
    correction: float | None = None,
) -> RegressionFit:
    """Estimate several equations in one block-diagonal OLS fit.

    Point estimates equal the equation-by-equation fits; the joint covariance
    is clustered on the replicated cluster ids, so a school's rows across all
    equation blocks form a single cluster and cross-equation covariances are
    available for delta-method functionals. Coefficients are named
    ``tag:name``. The reported residual_variance and r_squared describe the
    stacked regression as a whole.
    """
    frame = _as_frame(data)
    blocks = []
    for spec, tag in system.equations:
        spec.require_columns(frame)
        sub = _complete_rows(frame, spec.all_columns)
        n_params = 1 + len(spec.regressor_names)
        if len(sub) < n_params:
            raise InsufficientData(
                f"equation {tag!r} needs at least {n_params} complete rows, "
                f"have {len(sub)}"
            )
        X = _design(sub, spec.regressor_names)
        y = np.asarray(sub[spec.outcome_name], dtype=float)
        clusters = sub[spec.cluster_name].to_numpy()
        names = [f"{tag}:{INTERCEPT}"] + [f"{tag}:{r}" for r in spec.regressor_names]
        blocks.append((names, X, y, clusters))

    total_rows = sum(X.shape[0] for _, X, _, _ in blocks)
    total_params = sum(X.shape[1] for _, X, _, _ in blocks)
    X_stack = np.zeros((total_rows, total_params))
    y_stack = np.empty(total_rows)
    cluster_stack = np.concatenate([np.asarray(c) for _, _, _, c in blocks])
    names_all: list[str] = []
    row = col = 0
    for names, X, y, _ in blocks:
        n, k = X.shape
        X_stack[row : row + n, col : col + k] = X
        y_stack[row : row + n] = y
        names_all.extend(names)
        row += n
        col += k

    beta, R = _qr_solve(X_stack, y_stack)
    residuals = y_stack - X_stack @ beta
    n_clusters = int(pd.factorize(cluster_stack)[1].size)
    covariance = None
    if compute_covariance:
        # small-sample factor in underlying observations, not stacked rows:
        # stacking the same sample again must not shrink the correction
        if correction is None and n_clusters > 1:
            factor = system.replication_factor
            correction = cr1_factor(
                total_rows / factor, total_params / factor, n_clusters
            )
        covariance = clustered_covariance(
            X_stack,
            residuals,
            cluster_stack,
            bread=_bread_from_r(R),
            correction=correction,
        )
    return _finish_fit(tuple(names_all), beta, residuals, y_stack, covariance, n_clusters)


def delta_method(
    fit: RegressionFit,
    func: Callable[[Mapping[str, float]], float],
    gradient: Mapping[str, float] | Callable[[Mapping[str, float]], Mapping[str, float]],
) -> tuple[float, float]:
    """Value and standard error of a smooth functional of fitted coefficients.

    ``func`` maps the coefficient dict to the functional's value; ``gradient``
    is a name -> partial-derivative mapping (or a callable producing one)
    evaluated at the estimate. Names absent from the gradient get partial zero;
    names that are not coefficients of the fit raise ValueError.
    """
    if fit.covariance is None:
        raise ValueError("delta_method needs a fit with a covariance matrix")
    coefficients = dict(fit.coefficients)
    value = float(func(coefficients))
    grad_map = gradient(coefficients) if callable(gradient) else gradient
    unknown = [name for name in grad_map if name not in fit.names]
    if unknown:
        raise ValueError(f"gradient names not in fit: {unknown}")
    grad = np.array([float(grad_map.get(name, 0.0)) for name in fit.names])
    variance = float(grad @ fit.covariance @ grad)
    return value, float(np.sqrt(max(variance, 0.0)))
