"""Estimation strategies: correction formulas, identities, and oracles."""

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import config_with
from contamina.core_model import avg_score_column
from contamina.errors import (
    DegreeTooHigh,
    LambdaOutOfRange,
    MissingColumn,
    NonpositiveVariance,
    TooFewLags,
    ZeroBaseline,
)
from contamina.simulate import DriftLaw, simulate_panel
from contamina.strategies import (
    ReliabilityPoint,
    ReliabilitySeries,
    adjusted_first_stage,
    balancing_regression,
    build_reliability_series,
    eiv_correct,
    eiv_fs_strategy,
    eiv_th_strategy,
    fit_reliability_polynomial,
    forecast_reliability,
    iv_strategy,
    medium_regression,
    ols_strategy,
    share_explained,
)


class TestMediumAndBalancing:
    def test_contaminated_gap_near_closed_form(self, classical_sim):
        # beta + gamma * delta * (1 - lambda) = 0.01 + 0.4 * 0.25 * 0.12
        fit = medium_regression(classical_sim.panel)
        assert fit.coef("ses") == pytest.approx(0.022, abs=5 * fit.se("ses"))
        assert fit.coef(avg_score_column("g5_end")) == pytest.approx(
            0.352, abs=5 * fit.se(avg_score_column("g5_end"))
        )

    def test_balancing_slope_scales_with_lambda_tilde(self):
        sim = simulate_panel(
            config_with(n_students=100000, n_clusters=200, lambda_tilde=0.8, seed=13)
        )
        fit = balancing_regression(sim.panel)
        assert fit.coef("ses") == pytest.approx(0.2, abs=5 * fit.se("ses"))

    def test_zero_delta_zero_balancing_slope(self):
        sim = simulate_panel(
            config_with(n_students=50000, n_clusters=100, delta=0.0, seed=17)
        )
        fit = balancing_regression(sim.panel)
        assert abs(fit.coef("ses")) < 5 * fit.se("ses")

    def test_period_override(self, classical_sim):
        current = medium_regression(classical_sim.panel)
        lagged = medium_regression(classical_sim.panel, period="g5_mid")
        assert set(lagged.names) == {"intercept", "ses", avg_score_column("g5_mid")}
        assert lagged.coef("ses") != current.coef("ses")

    def test_missing_outcome_column(self, classical_sim):
        with pytest.raises(MissingColumn):
            medium_regression(classical_sim.panel, outcome="wage")


class TestAdjustedFirstStage:
    def test_published_magnitudes(self):
        assert adjusted_first_stage(0.887, 0.992, 1.0) == pytest.approx(
            0.879904, abs=1e-9
        )

    def test_equal_variances_is_identity(self):
        assert adjusted_first_stage(0.7, 0.5, 0.5) == pytest.approx(0.7)

    @pytest.mark.parametrize("lag,cur", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_nonpositive_variance(self, lag, cur):
        with pytest.raises(NonpositiveVariance):
            adjusted_first_stage(0.9, lag, cur)


class TestEivCorrect:
    def test_published_first_stage_reliability(self):
        beta, gamma = eiv_correct(0.028, 0.381, 0.229, 0.879904)
        assert beta == pytest.approx(0.016091, abs=1e-6)
        assert gamma == pytest.approx(0.433002, abs=1e-6)

    def test_published_forecast_reliability(self):
        beta, gamma = eiv_correct(0.028, 0.381, 0.229, 0.899)
        assert beta == pytest.approx(0.018198, abs=1e-6)
        assert gamma == pytest.approx(0.423804, abs=1e-6)

    def test_lambda_one_changes_nothing(self):
        assert eiv_correct(0.03, 0.4, 0.2, 1.0) == (0.03, 0.4)

    @pytest.mark.parametrize("bad", [0.0, -0.5, 1.0001])
    def test_out_of_range(self, bad):
        with pytest.raises(LambdaOutOfRange):
            eiv_correct(0.03, 0.4, 0.2, bad)

    @given(
        beta=st.floats(-0.5, 0.5),
        gamma=st.floats(-2.0, 2.0),
        delta=st.floats(-1.0, 1.0),
        lambda_=st.floats(0.05, 1.0),
        lambda_tilde=st.floats(0.05, 1.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_inverts_contamination_exactly(
        self, beta, gamma, delta, lambda_, lambda_tilde
    ):
        # contaminate with the closed forms, then undo; the reported-score
        # shrinkage factor must drop out completely
        beta_m = beta + gamma * delta * (1.0 - lambda_)
        gamma_m = gamma * lambda_ / lambda_tilde
        delta_m = delta * lambda_tilde
        beta_eiv, gamma_eiv = eiv_correct(beta_m, gamma_m, delta_m, lambda_)
        assert beta_eiv == pytest.approx(beta, abs=1e-10)
        assert gamma_eiv * lambda_tilde == pytest.approx(gamma, abs=1e-10)


class TestIvStrategy:
    def test_recovers_gap_under_constant_drift(self, classical_sim):
        est = iv_strategy(classical_sim.panel)
        assert est.beta_hat == pytest.approx(0.01, abs=5 * est.se_beta)
        assert est.gamma_hat == pytest.approx(0.4, abs=5 * est.se_gamma)

    def test_ratio_identities_exact(self, classical_sim):
        est = iv_strategy(classical_sim.panel)
        d = est.details
        assert est.gamma_hat == pytest.approx(
            d["theta1_hat"] / d["pi_hat"], abs=1e-10
        )
        assert est.beta_hat == pytest.approx(
            d["theta0_hat"] - est.gamma_hat * d["kappa_hat"], abs=1e-10
        )

    def test_no_second_lag_available(self, classical_sim):
        from contamina.errors import InsufficientData

        with pytest.raises(InsufficientData):
            iv_strategy(classical_sim.panel, lag=2)


class TestEivFsStrategy:
    def test_recovers_gap_and_reliability(self, classical_sim):
        est = eiv_fs_strategy(classical_sim.panel)
        assert est.lambda_hat == pytest.approx(0.88, abs=0.02)
        assert est.beta_hat == pytest.approx(0.01, abs=5 * est.se_beta)
        assert est.gamma_hat == pytest.approx(0.4, abs=5 * est.se_gamma)
        assert est.details["se_lambda"] > 0

    def test_discriminates_from_iv_under_outcome_drift(self):
        # drift noise in the outcome error biases IV but not the EIV
        # correction, whose reliability input ignores the outcome
        config = config_with(
            n_students=100000, n_clusters=200, teacher_drift_weight=0.3,
            drift_law=DriftLaw.of_noise(0.1), seed=23,
        )
        sim = simulate_panel(config)
        iv = iv_strategy(sim.panel)
        fs = eiv_fs_strategy(sim.panel)
        bias = 0.25 * 0.3 * 0.1 / 0.88
        assert iv.beta_hat == pytest.approx(0.01 + bias, abs=5 * iv.se_beta)
        assert iv.beta_hat - 0.01 > 3 * iv.se_beta
        assert fs.beta_hat == pytest.approx(0.01, abs=5 * fs.se_beta)

    def test_no_measurement_error_clips_to_one(self):
        sim = simulate_panel(
            config_with(n_students=5000, n_clusters=25, sigma2_m=0.0, seed=3)
        )
        est = eiv_fs_strategy(sim.panel)
        assert est.lambda_hat <= 1.0
        if est.details["lambda_clipped"]:
            assert est.beta_hat == est.details["beta_m"]

    def test_se_method_none_skips_ses(self, classical_sim):
        est = eiv_fs_strategy(classical_sim.panel, se_method="none")
        assert est.se_beta is None and est.se_gamma is None
        assert est.details["se_lambda"] is None

    def test_bootstrap_oracle_for_stacked_se(self):
        config = config_with(n_students=2000, n_clusters=100, seed=77)
        sim = simulate_panel(config)
        est = eiv_fs_strategy(sim.panel)
        frame = sim.panel.frame
        groups = {g: sub for g, sub in frame.groupby("school_id")}
        labels = list(groups)
        rng = np.random.default_rng(5)
        draws = []
        for _ in range(300):
            picked = rng.choice(len(labels), size=len(labels), replace=True)
            pieces = []
            for new_id, index in enumerate(picked):
                piece = groups[labels[index]].copy()
                piece["school_id"] = new_id
                pieces.append(piece)
            boot = pd.concat(pieces, ignore_index=True)
            draws.append(eiv_fs_strategy(boot, se_method="none").beta_hat)
        boot_se = np.std(draws, ddof=1)
        assert est.se_beta == pytest.approx(boot_se, rel=0.15)


class TestReliabilitySeries:
    def test_full_grid_has_seven_lags(self):
        sim = simulate_panel(
            config_with(n_students=3000, n_clusters=20, periods=8, seed=2)
        )
        series = build_reliability_series(sim.panel)
        assert [p.tau for p in series.points] == list(range(1, 8))
        assert series.points[0].label == "g5_mid"
        assert series.points[-1].label == "g2_mid"

    def test_too_few_lags(self):
        sim = simulate_panel(
            config_with(n_students=3000, n_clusters=20, periods=3, seed=2)
        )
        with pytest.raises(TooFewLags):
            build_reliability_series(sim.panel)

    def test_flat_profile_under_classical_error(self):
        sim = simulate_panel(
            config_with(n_students=150000, n_clusters=200, periods=5, seed=29)
        )
        series = build_reliability_series(sim.panel)
        for point in series.points:
            assert point.pi_prime == pytest.approx(0.88, abs=5 * point.se)


def series_from(taus, values, ses=None):
    points = tuple(
        ReliabilityPoint(
            tau=int(t), label=f"lag{t}", pi_prime=float(v),
            se=None if ses is None else float(s), n_obs=100,
        )
        for t, v, s in zip(taus, values, ses if ses is not None else taus)
    )
    return ReliabilitySeries(points=points, current="g5_end")


class TestForecastReliability:
    def test_exact_line_recovered(self):
        taus = np.array([1, 2, 3, 4, 5])
        series = series_from(taus, 0.9 - 0.02 * taus)
        lambda_hat, r2 = forecast_reliability(series, degree=1)
        assert lambda_hat == pytest.approx(0.9, abs=1e-10)
        assert r2 == pytest.approx(1.0, abs=1e-10)

    def test_eval_point_override(self):
        taus = np.array([1, 2, 3, 4])
        series = series_from(taus, 0.9 - 0.02 * taus)
        lambda_hat, _ = forecast_reliability(series, degree=1, eval_tau=2.0)
        assert lambda_hat == pytest.approx(0.86, abs=1e-10)

    @pytest.mark.parametrize("degree", [0, 4, -1])
    def test_unsupported_degree(self, degree):
        series = series_from([1, 2, 3, 4, 5], [0.9] * 5)
        with pytest.raises(DegreeTooHigh):
            forecast_reliability(series, degree=degree)

    def test_degree_needs_enough_points(self):
        series = series_from([1, 2, 3], [0.9, 0.88, 0.86])
        with pytest.raises(DegreeTooHigh):
            forecast_reliability(series, degree=2)

    @given(
        coefficients=st.lists(st.floats(-5.0, 5.0), min_size=2, max_size=4),
        extra=st.integers(0, 3),
    )
    @settings(max_examples=100, deadline=None)
    def test_polynomial_reproduction(self, coefficients, extra):
        degree = len(coefficients) - 1
        taus = np.arange(1, degree + 2 + extra + 1, dtype=float)
        values = np.polynomial.polynomial.polyval(taus, coefficients)
        series = series_from(taus, values)
        lambda_hat, r2 = forecast_reliability(series, degree=degree)
        assert lambda_hat == pytest.approx(coefficients[0], abs=1e-6)

    def test_weighted_fit_needs_ses(self):
        series = series_from([1, 2, 3, 4], [0.9, 0.88, 0.86, 0.84])
        with pytest.raises(NonpositiveVariance):
            fit_reliability_polynomial(series, 1, weighted=True)


class TestEivThStrategy:
    def test_recovers_reliability_under_ability_drift(self):
        config = config_with(
            n_students=50000, n_clusters=200, periods=8,
            drift_law=DriftLaw.of_ability_linked(0.02), seed=31,
        )
        sim = simulate_panel(config)
        est = eiv_th_strategy(sim.panel)
        assert est.lambda_hat == pytest.approx(0.88, abs=0.015)
        assert est.details["fit_r2"] > 0.95
        assert est.beta_hat == pytest.approx(0.01, abs=5 * est.se_beta)
        fs = eiv_fs_strategy(sim.panel)
        assert fs.lambda_hat == pytest.approx(0.8624, abs=0.01)

    def test_series_and_fit_in_details(self, classical_sim):
        sim = simulate_panel(
            config_with(n_students=20000, n_clusters=100, periods=4, seed=37)
        )
        est = eiv_th_strategy(sim.panel)
        assert len(est.details["series"]) == 3
        for point in est.details["series"]:
            assert set(point) >= {"tau", "pi_prime", "se", "fitted"}


class TestShareExplained:
    def test_published_share(self):
        assert share_explained(0.028, 0.016) == pytest.approx(42.857143, abs=1e-5)

    def test_scale_invariance(self):
        assert share_explained(0.06, 0.02) == pytest.approx(
            share_explained(0.03, 0.01)
        )

    def test_zero_baseline(self):
        with pytest.raises(ZeroBaseline):
            share_explained(0.0, 0.01)

    def test_overcorrection_exceeds_hundred(self):
        assert share_explained(0.02, -0.01) == pytest.approx(150.0)


class TestOlsStrategy:
    def test_packages_medium_and_balancing(self, classical_sim):
        est = ols_strategy(classical_sim.panel)
        medium = medium_regression(classical_sim.panel)
        assert est.beta_hat == medium.coef("ses")
        assert est.gamma_hat == medium.coef(avg_score_column("g5_end"))
        assert est.lambda_hat is None
        assert est.details["delta_m"] == pytest.approx(0.25, abs=0.02)
