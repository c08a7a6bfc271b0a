"""Acceptance gate: one test per shipping criterion.

Run with -v to get one pass/fail line per criterion. The Monte Carlo
criteria use R=200 replications at N=50000 and take a couple of minutes
together; everything else is near-instant.
"""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import config_with
from contamina.cli import main as cli_main
from contamina.core_model import VariableSpec, avg_score_column
from contamina.diagnostics import delta_regressions
from contamina.mc_verify import mc_run
from contamina.regress import StackedSystem, ols_fit, stacked_fit
from contamina.simulate import DgpConfig, DriftLaw, simulate_panel
from contamina.strategies import (
    forecast_reliability,
    iv_strategy,
)
from test_strategies import series_from

R = 200
HEAVY = dict(n_students=50000, n_clusters=250)


def mc_config(**overrides):
    return config_with(**{**HEAVY, **overrides})


def within(summary, name, target, k=4.0):
    est = summary.estimands[name]
    return abs(est.mean - target) <= k * est.mc_se


@pytest.fixture(scope="module")
def classical_run():
    return mc_run(
        mc_config(seed=7002), R, estimands=("beta_m", "gamma_m", "delta_m")
    )


@pytest.fixture(scope="module")
def shrunk_run():
    return mc_run(
        mc_config(lambda_tilde=0.88, seed=7003),
        R,
        estimands=("beta_m", "gamma_m", "delta_m"),
    )


def test_criterion_1_published_arithmetic(tmp_path):
    # the paper-check command must confirm every derivable headline number
    # at its default tolerances, in well under a second
    runner = CliRunner()
    result = runner.invoke(cli_main, ["paper-check", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    report = json.loads(
        (tmp_path / "paper_check.json").read_text(encoding="utf-8")
    )
    assert report["all_ok"] is True
    named = {c["name"]: c for c in report["checks"]}

    targets = {
        "gamma_iv_equals_theta1_over_pi": 0.432,
        "lambda_fs_equals_adjusted_first_stage": 0.880,
        "beta_eiv_fs": 0.016,
        "gamma_eiv_fs": 0.433,
        "beta_eiv_th": 0.018,
        "gamma_eiv_th": 0.424,
    }
    for name, target in targets.items():
        check = named[name]
        assert check["ok"], name
        assert check["recomputed"] == pytest.approx(target, abs=0.0005), name

    share = named["share_iv"]
    assert share["ok"] and abs(share["recomputed"] - 42.14) <= 1.0
    for name in ("share_eiv_fs_in_range", "share_eiv_th_in_range"):
        check = named[name]
        assert check["ok"], name
        assert 34.1 <= check["recomputed"] <= 43.8


def test_criterion_2_contaminated_coefficients(classical_run):
    # beta 0.01, gamma 0.4, delta 0.25, reliability 0.88: the medium
    # regression must land on the contaminated values, not the true ones
    summary = classical_run.summary
    assert summary.reportable
    assert within(summary, "beta_m", 0.022)
    assert within(summary, "gamma_m", 0.352)
    assert within(summary, "delta_m", 0.25)


def test_criterion_3_reporting_scale_equivalence(classical_run, shrunk_run):
    # shrinking reported scores toward the mean moves the score loading and
    # the balancing slope but leaves the contaminated gap untouched
    base = classical_run.summary.estimands["beta_m"]
    shrunk = shrunk_run.summary.estimands["beta_m"]
    z = (base.mean - shrunk.mean) / np.hypot(base.mc_se, shrunk.mc_se)
    assert abs(z) < 4.0
    assert within(shrunk_run.summary, "gamma_m", 0.40)
    assert within(shrunk_run.summary, "delta_m", 0.22)


def test_criterion_4_constant_drift_corrections():
    # a pure level shift between periods must not bias the instrumented or
    # reliability-corrected estimates, and the adjusted first stage must
    # recover reliability itself
    result = mc_run(
        mc_config(drift_law=DriftLaw.of_constant(0.1), seed=7004),
        R,
        estimands=("beta_iv", "beta_eiv_fs", "lambda_fs"),
    )
    assert within(result.summary, "beta_iv", 0.01)
    assert within(result.summary, "beta_eiv_fs", 0.01)
    assert within(result.summary, "lambda_fs", 0.88)


def test_criterion_5_noise_drift_discrimination():
    # drift noise that leaks into the outcome through the teacher weight
    # biases the instrumented estimate by delta * w * Var(drift) / Var(u),
    # while the first-stage reliability correction stays clean
    result = mc_run(
        mc_config(
            drift_law=DriftLaw.of_noise(0.1),
            teacher_drift_weight=0.3,
            seed=7005,
        ),
        R,
        estimands=("beta_iv", "beta_eiv_fs"),
    )
    iv_limit = 0.01 + 0.25 * 0.3 * 0.1 / 0.88
    iv = result.summary.estimands["beta_iv"]
    assert within(result.summary, "beta_iv", iv_limit)
    assert abs(iv.mean - 0.01) > 4 * iv.mc_se
    assert within(result.summary, "beta_eiv_fs", 0.01)


def test_criterion_6_history_forecast_recovery():
    # drift proportional to current ability tilts the reliability-by-lag
    # series linearly; its extrapolation back to lag zero must still find
    # the true reliability, and the corrected gap must be unbiased
    result = mc_run(
        mc_config(
            periods=8, drift_law=DriftLaw.of_ability_linked(0.02), seed=7006
        ),
        R,
        estimands=("lambda_th", "beta_eiv_th", "th_fit_r2"),
    )
    summary = result.summary
    assert abs(summary.estimands["lambda_th"].mean - 0.88) <= 0.01
    assert within(summary, "beta_eiv_th", 0.01)
    assert summary.estimands["th_fit_r2"].mean > 0.95


def test_criterion_7_exact_identities():
    sim = simulate_panel(config_with(n_students=5000, n_clusters=50, seed=7007))
    frame = sim.panel.frame
    score = avg_score_column("g5_end")

    # 2SLS coefficient equals the reduced-form / first-stage ratio
    iv = iv_strategy(sim.panel)
    assert iv.gamma_hat == pytest.approx(
        iv.details["theta1_hat"] / iv.details["pi_hat"], abs=1e-12
    )

    # stacking changes nothing about the point estimates
    med_spec = VariableSpec("outcome", ("ses", score))
    bal_spec = VariableSpec(score, ("ses",))
    joint = stacked_fit(
        frame, StackedSystem(equations=((med_spec, "med"), (bal_spec, "bal")))
    )
    med, bal = ols_fit(frame, med_spec), ols_fit(frame, bal_spec)
    assert joint.coef("med:ses") == pytest.approx(med.coef("ses"), abs=1e-10)
    assert joint.coef(f"med:{score}") == pytest.approx(med.coef(score), abs=1e-10)
    assert joint.coef("bal:ses") == pytest.approx(bal.coef("ses"), abs=1e-10)

    # partialling the score out of both sides reproduces the multiple
    # regression coefficient on ses
    ses_on_score = ols_fit(frame, VariableSpec("ses", (score,)))
    y_on_score = ols_fit(frame, VariableSpec("outcome", (score,)))
    sub = frame.dropna(subset=["outcome", "ses", score])
    ses_resid = (
        sub["ses"]
        - ses_on_score.coef("intercept")
        - ses_on_score.coef(score) * sub[score]
    )
    y_resid = (
        sub["outcome"]
        - y_on_score.coef("intercept")
        - y_on_score.coef(score) * sub[score]
    )
    partial = float(np.dot(ses_resid, y_resid) / np.dot(ses_resid, ses_resid))
    assert partial == pytest.approx(med.coef("ses"), abs=1e-10)

    # a straight-line lag profile is recovered exactly by the forecast
    taus = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    series = series_from(taus, 0.91 - 0.015 * taus)
    lambda_hat, r2 = forecast_reliability(series, degree=1)
    assert lambda_hat == pytest.approx(0.91, abs=1e-10)
    assert r2 == pytest.approx(1.0, abs=1e-10)


def test_criterion_8_drift_detection_and_false_positives():
    # a planted SES-linked drift must be flagged at the 1% level in at
    # least 95 of 100 draws; balanced growth must stay under a 5% false
    # positive rate across characteristics
    detections = 0
    for i in range(100):
        sim = simulate_panel(
            config_with(
                n_students=10000, n_clusters=50,
                drift_law=DriftLaw.of_ses_linked(0.05), seed=8100 + i,
            )
        )
        report = delta_regressions(sim.panel, significance=0.01)
        detections += report.checks[0].flag == "warn"
    assert detections >= 95

    false_positives = 0
    n_null_checks = 0
    for i in range(100):
        sim = simulate_panel(
            config_with(n_students=10000, n_clusters=50, seed=8300 + i)
        )
        report = delta_regressions(
            sim.panel, ("ses", "ses_raw"), significance=0.01
        )
        for check in report.checks:
            n_null_checks += 1
            false_positives += check.flag == "warn"
    assert n_null_checks == 200
    assert false_positives <= 0.05 * n_null_checks
