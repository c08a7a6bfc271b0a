import numpy as np
import pandas as pd
import pytest

from contamina.core_model import PERIOD_LABELS, raw_score_column
from contamina.simulate import DgpConfig, DriftLaw, simulate_panel

BASE_PARAMS = dict(
    beta=0.01,
    gamma=0.4,
    delta=0.25,
    lambda_tilde=1.0,
    sigma2_u=0.88,
    sigma2_m=0.12,
    sigma2_e=0.05,
    n_students=20000,
    n_clusters=100,
    periods=2,
    seed=20260819,
)


def config_with(**overrides) -> DgpConfig:
    params = {**BASE_PARAMS, **overrides}
    params.setdefault("drift_law", DriftLaw.of_constant(0.0))
    return DgpConfig(**params)


@pytest.fixture(scope="session")
def make_config():
    return config_with


@pytest.fixture(scope="session")
def classical_sim():
    """One large classical-error panel: lambda = 0.88, no drift, T = 2."""
    return simulate_panel(config_with(n_students=100000, n_clusters=250, seed=41))


def raw_table(n_per_cohort=6, cohorts=("c1",), periods=("g5_mid", "g5_end"), seed=0):
    """Minimal valid raw table for dataset validation tests."""
    rng = np.random.default_rng(seed)
    frames = []
    for i, cohort in enumerate(cohorts):
        rows = {
            "student_id": np.arange(n_per_cohort) + 1000 * i,
            "school_id": np.arange(n_per_cohort) % 3,
            "cohort": cohort,
            "ses_raw": rng.normal(0, 2, n_per_cohort) + i,
            "outcome": rng.integers(0, 2, n_per_cohort).astype(float),
        }
        for label in periods:
            for domain in ("reading", "math"):
                rows[raw_score_column(domain, label)] = rng.normal(
                    10 * i, 3, n_per_cohort
                )
        frames.append(pd.DataFrame(rows))
    table = pd.concat(frames, ignore_index=True)
    for label in PERIOD_LABELS:
        for domain in ("reading", "math"):
            column = raw_score_column(domain, label)
            if column not in table.columns:
                table[column] = np.nan
    return table
