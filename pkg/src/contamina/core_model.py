"""Domain types, dataset validation, and per-cohort standardization.

The panel is a columnar student-level table: one row per student, with an
outcome, a socioeconomic-status measure standardized within cohort, and test
scores on a half-year grade grid (grades 2..5, midterm and end-of-year term).
Scores arrive as raw reading and math columns, are standardized per cohort and
per domain with the sample standard deviation, and are averaged into one
analysis score per grade/term cell. Missing values propagate; nothing is
imputed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConstantColumn,
    EmptyDataset,
    MissingColumn,
    NonBinaryOutcome,
    SingletonCohort,
)

DOMAINS = ("reading", "math")
GRADES = (2, 3, 4, 5)
TERMS = ("mid", "end")

#: Grade/term cells in chronological order; the last one is the current period.
PERIOD_LABELS: tuple[str, ...] = tuple(f"g{g}_{t}" for g in GRADES for t in TERMS)

ID_COLUMNS = ("student_id", "school_id", "cohort")
STANDARDIZATION_TOLERANCE = 1e-9


def raw_score_column(domain: str, label: str) -> str:
    """Column name of a raw domain score in the external CSV schema."""
    return f"score_{domain}_{label}"


def std_score_column(domain: str, label: str) -> str:
    """Column name of a per-cohort standardized domain score."""
    return f"std_{domain}_{label}"


def avg_score_column(label: str) -> str:
    """Column name of the cross-domain average analysis score."""
    return f"avg_score_{label}"


def lag_label(tau: int) -> str:
    """Period label `tau` half-year steps before the current (grade-5 end) one."""
    if not 0 <= tau < len(PERIOD_LABELS):
        raise ValueError(f"tau must be in 0..{len(PERIOD_LABELS) - 1}, got {tau}")
    return PERIOD_LABELS[len(PERIOD_LABELS) - 1 - tau]


#: External CSV schema, in exact header order (empty field = missing).
EXTERNAL_COLUMNS: tuple[str, ...] = (
    "student_id",
    "school_id",
    "cohort",
    "ses_raw",
    "outcome",
    *(raw_score_column(d, label) for d in DOMAINS for label in PERIOD_LABELS),
)


class RowRejection(NamedTuple):
    row: int
    reason: str


@dataclass(frozen=True)
class VariableSpec:
    """Names the outcome, ordered regressors, and cluster column of one fit."""

    outcome_name: str
    regressor_names: tuple[str, ...]
    cluster_name: str = "school_id"

    def __post_init__(self) -> None:
        object.__setattr__(self, "regressor_names", tuple(self.regressor_names))
        names = (self.outcome_name, *self.regressor_names, self.cluster_name)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate names in variable spec: {names}")

    @property
    def all_columns(self) -> tuple[str, ...]:
        return (self.outcome_name, *self.regressor_names, self.cluster_name)

    def require_columns(self, frame: pd.DataFrame) -> None:
        missing = [c for c in self.all_columns if c not in frame.columns]
        if missing:
            raise MissingColumn(f"columns not in dataset: {missing}")


@dataclass(frozen=True)
class RegressionFit:
    """A fitted linear regression with cluster-robust covariance.

    ``coefficients`` maps names (intercept first) to estimates, in the order of
    ``names``. ``covariance`` is aligned to that order and is None only when the
    caller explicitly skipped covariance computation. ``residual_variance`` is
    SSR/(N-k) with k counting the intercept.
    """

    names: tuple[str, ...]
    coefficients: Mapping[str, float]
    covariance: np.ndarray | None
    residual_variance: float
    r_squared: float
    n_obs: int
    n_clusters: int

    def coef(self, name: str) -> float:
        return self.coefficients[name]

    def vector(self) -> np.ndarray:
        return np.array([self.coefficients[n] for n in self.names])

    def variance(self, name: str) -> float:
        if self.covariance is None:
            raise ValueError("fit was computed without a covariance matrix")
        i = self.names.index(name)
        return float(self.covariance[i, i])

    def se(self, name: str) -> float:
        return float(np.sqrt(max(self.variance(name), 0.0)))

    def to_dict(self) -> dict:
        return {
            "coefficients": {k: float(v) for k, v in self.coefficients.items()},
            "se": {n: self.se(n) for n in self.names} if self.covariance is not None else None,
            "residual_variance": float(self.residual_variance),
            "r_squared": float(self.r_squared),
            "n_obs": int(self.n_obs),
            "n_clusters": int(self.n_clusters),
        }


def standardize(values: np.ndarray | pd.Series) -> np.ndarray:
    """Center and scale by the sample standard deviation (N-1), NaN-aware.

    Cells with fewer than two non-missing observations come back all-NaN; a
    constant cell raises ConstantColumn. Applying this to an already
    standardized column is the identity up to floating point.
    """
    x = np.asarray(values, dtype=float)
    finite = np.isfinite(x)
    if finite.sum() < 2:
        return np.full_like(x, np.nan)
    mean = x[finite].mean()
    sd = x[finite].std(ddof=1)
    if sd == 0.0:
        raise ConstantColumn("cannot standardize a constant column")
    out = np.full_like(x, np.nan)
    out[finite] = (x[finite] - mean) / sd
    return out


@dataclass(frozen=True)
class PanelDataset:
    """Immutable student-level panel ready for estimation.

    ``frame`` holds the identifier columns, ses/ses_raw, the outcome, raw and
    standardized domain scores, and the avg_score analysis columns. Construct
    via :func:`validate_dataset` (raw CSV tables) or
    :meth:`from_analysis_columns` (scores already on the analysis scale, as the
    simulator produces). Instances are never mutated after construction and are
    safe for concurrent reads.
    """

    frame: pd.DataFrame = field(repr=False)
    outcome_is_binary: bool
    restandardized: bool
    rejections: tuple[RowRejection, ...] = ()

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    def cluster_count(self, cluster_name: str = "school_id") -> int:
        return int(self.frame[cluster_name].nunique())

    def periods_available(self) -> tuple[str, ...]:
        """Labels of periods with at least one non-missing analysis score."""
        out = []
        for label in PERIOD_LABELS:
            col = avg_score_column(label)
            if col in self.frame.columns and self.frame[col].notna().any():
                out.append(label)
        return tuple(out)

    def current_period(self) -> str:
        available = self.periods_available()
        if not available:
            raise MissingColumn("dataset has no usable analysis score column")
        return available[-1]

    def complete_rows(self, columns: Sequence[str]) -> pd.DataFrame:
        """Rows with every listed column non-missing (complete-case subset)."""
        missing = [c for c in columns if c not in self.frame.columns]
        if missing:
            raise MissingColumn(f"columns not in dataset: {missing}")
        mask = np.ones(len(self.frame), dtype=bool)
        for c in columns:
            mask &= self.frame[c].notna().to_numpy()
        return self.frame.loc[mask]

    def to_csv(self, path) -> None:
        """Write the external CSV schema (raw scores, empty field = missing)."""
        self.frame.loc[:, list(EXTERNAL_COLUMNS)].to_csv(
            path, index=False, na_rep="", encoding="utf-8"
        )

    @classmethod
    def from_analysis_columns(
        cls,
        base: pd.DataFrame,
        scores: Mapping[str, np.ndarray],
    ) -> "PanelDataset":
        """Build a panel whose scores are already on the analysis scale.

        ``base`` must provide student_id, school_id, cohort, ses, ses_raw and
        outcome. ``scores`` maps period labels to score arrays; each score is
        written to both domain columns (raw and standardized) and to the
        avg_score column, so the cross-domain average identity holds exactly.
        Periods not supplied are all-missing.
        """
        n = len(base)
        data: dict[str, np.ndarray | pd.Series] = {
            c: base[c].to_numpy() for c in ("student_id", "school_id", "cohort")
        }
        data["ses_raw"] = np.asarray(base["ses_raw"], dtype=float)
        data["ses"] = np.asarray(base["ses"], dtype=float)
        data["outcome"] = np.asarray(base["outcome"], dtype=float)
        nan = np.full(n, np.nan)
        for label in PERIOD_LABELS:
            values = np.asarray(scores[label], dtype=float) if label in scores else nan
            for domain in DOMAINS:
                data[raw_score_column(domain, label)] = values
                data[std_score_column(domain, label)] = values
            data[avg_score_column(label)] = values
        frame = pd.DataFrame(data)
        outcome = frame["outcome"].to_numpy()
        finite = outcome[np.isfinite(outcome)]
        is_binary = bool(finite.size) and bool(np.isin(finite, (0.0, 1.0)).all())
        return cls(frame=frame, outcome_is_binary=is_binary, restandardized=False)


def _reject_incomplete_rows(frame: pd.DataFrame) -> tuple[pd.DataFrame, list[RowRejection]]:
    rejections: list[RowRejection] = []
    required = ["school_id", "cohort", "ses_raw", "outcome"]
    bad = frame[required].isna().any(axis=1)
    for idx in frame.index[bad]:
        missing = [c for c in required if pd.isna(frame.at[idx, c])]
        rejections.append(RowRejection(int(idx), f"missing {', '.join(missing)}"))
    return frame.loc[~bad], rejections


def validate_dataset(
    raw_table: pd.DataFrame,
    *,
    require_binary_outcome: bool = False,
) -> PanelDataset:
    """Validate a raw external-schema table and standardize it per cohort.

    Parameters
    ----------
    raw_table : pandas.DataFrame
        Parsed CSV in the external schema (see ``EXTERNAL_COLUMNS``).
    require_binary_outcome : bool
        When True, any outcome value outside {0, 1} raises NonBinaryOutcome.
        The default accepts continuous outcomes because simulated panels carry
        the linear-model outcome directly.

    Returns
    -------
    PanelDataset
        Per cohort, ses and each domain score are centered and scaled by the
        sample standard deviation; avg_score columns average the two
        standardized domain scores and are missing whenever either is. Rows
        missing school_id, cohort, ses_raw, or outcome are dropped and recorded
        in ``rejections`` with their original row index.

    Raises
    ------
    MissingColumn, EmptyDataset, NonBinaryOutcome, SingletonCohort, ConstantColumn
    """
    if not isinstance(raw_table, pd.DataFrame):
        raise TypeError("validate_dataset expects a pandas DataFrame")
    missing = [c for c in EXTERNAL_COLUMNS if c not in raw_table.columns]
    if missing:
        raise MissingColumn(f"missing columns: {missing}")
    if len(raw_table) == 0:
        raise EmptyDataset("input table has no rows")

    frame = raw_table.loc[:, list(EXTERNAL_COLUMNS)].copy()
    numeric_cols = ["ses_raw", "outcome"] + [
        raw_score_column(d, label) for d in DOMAINS for label in PERIOD_LABELS
    ]
    for col in numeric_cols:
        frame[col] = pd.to_numeric(frame[col], errors="coerce")

    frame, rejections = _reject_incomplete_rows(frame)
    if len(frame) == 0:
        raise EmptyDataset("all rows were rejected by hard constraints")

    outcome = frame["outcome"].to_numpy(dtype=float)
    is_binary = bool(np.isin(outcome, (0.0, 1.0)).all())
    if require_binary_outcome and not is_binary:
        bad = frame.index[~np.isin(outcome, (0.0, 1.0))][:5].tolist()
        raise NonBinaryOutcome(f"outcome has non-binary values, e.g. rows {bad}")

    cohort_sizes = frame.groupby("cohort").size()
    singletons = cohort_sizes[cohort_sizes < 2]
    if len(singletons):
        raise SingletonCohort(
            f"cohorts with fewer than 2 rows cannot be standardized: "
            f"{list(singletons.index)}"
        )

    frame = frame.reset_index(drop=True)
    positions = {
        c: np.asarray(ix) for c, ix in frame.groupby("cohort", sort=False).indices.items()
    }

    def per_cohort_standardize(column: str) -> np.ndarray:
        x = frame[column].to_numpy(dtype=float)
        out = np.full_like(x, np.nan)
        for cohort, pos in positions.items():
            try:
                out[pos] = standardize(x[pos])
            except ConstantColumn:
                raise ConstantColumn(
                    f"column {column!r} is constant within cohort {cohort!r}"
                ) from None
        return out

    frame["ses"] = per_cohort_standardize("ses_raw")

    for label in PERIOD_LABELS:
        for domain in DOMAINS:
            frame[std_score_column(domain, label)] = per_cohort_standardize(
                raw_score_column(domain, label)
            )
        reading = frame[std_score_column("reading", label)]
        math = frame[std_score_column("math", label)]
        frame[avg_score_column(label)] = (reading + math) / 2.0

    _check_standardization(frame, positions)

    ordered = list(EXTERNAL_COLUMNS[:4]) + ["ses"] + list(EXTERNAL_COLUMNS[4:])
    extra = [c for c in frame.columns if c not in ordered]
    frame = frame.loc[:, ordered + extra]
    return PanelDataset(
        frame=frame,
        outcome_is_binary=is_binary,
        restandardized=True,
        rejections=tuple(rejections),
    )


def _check_standardization(frame: pd.DataFrame, positions: Mapping) -> None:
    """Defensive construction check: standardized cells have mean 0, var 1."""
    for label in PERIOD_LABELS:
        for domain in DOMAINS:
            col = frame[std_score_column(domain, label)].to_numpy()
            for cohort, pos in positions.items():
                vals = col[pos]
                vals = vals[np.isfinite(vals)]
                if vals.size < 2:
                    continue
                if abs(vals.mean()) > STANDARDIZATION_TOLERANCE or (
                    abs(vals.var(ddof=1) - 1.0) > STANDARDIZATION_TOLERANCE
                ):
                    raise AssertionError(
                        f"standardization failed for {domain} {label} in cohort {cohort}"
                    )


def read_panel_csv(path, *, require_binary_outcome: bool = False) -> PanelDataset:
    """Parse an external-schema CSV file and validate it."""
    raw = pd.read_csv(path, encoding="utf-8")
    return validate_dataset(raw, require_binary_outcome=require_binary_outcome)
