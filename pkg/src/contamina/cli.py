"""Command-line interface.

Subcommands: simulate (draw a synthetic panel), fit (run the estimation
strategies on a panel CSV), diagnose (drift balance checks), mc (Monte Carlo
verification against closed-form limits), paper-check (re-derive the
published headline numbers from one another).

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation
failure, 4 verification mismatch.
"""

from __future__ import annotations

import dataclasses
import datetime
import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .core_model import read_panel_csv
from .diagnostics import delta_path, delta_regressions
from .errors import ContaminaError, InvalidConfig, MismatchBeyondTolerance, TooFewLags
from .mc_verify import closed_form_predictions, mc_run
from .published import CONSTANTS_VERSION, PUBLISHED
from .simulate import DgpConfig, simulate_panel
from .strategies import (
    eiv_correct,
    eiv_fs_strategy,
    eiv_th_strategy,
    iv_strategy,
    ols_strategy,
    share_explained,
)

SCHEMA_VERSION = "1.0"
Z_95 = 1.959963984540054


def _jsonable(obj):
    """Make a payload strict-JSON safe: numpy scalars down, non-finite to null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if np.isfinite(value) else None
    return obj


def _out_dir(out: str | None) -> Path:
    base = out or os.environ.get("CONTAMINA_OUT_DIR") or "."
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _metadata(**extra) -> dict:
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return {
        "generated_at": stamp,
        "package_version": __version__,
        **extra,
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(
        json.dumps(_jsonable(payload), indent=2, allow_nan=False) + "\n",
        encoding="utf-8",
    )


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ContaminaError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)
        except (OSError, json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    return wrapper


@click.group()
@click.version_option(__version__, prog_name="contamina")
def main() -> None:
    """Quantify and correct score-contamination bias in conditional gaps."""


@main.command()
@click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False),
    help="JSON file with the data-generating parameters.",
)
@click.option(
    "--out", default=None, type=click.Path(file_okay=False),
    help="Output directory (default: CONTAMINA_OUT_DIR or the working directory).",
)
@click.option("--stem", default="panel", show_default=True, help="Base name for the CSV pair.")
@_handle_errors
def simulate(config_path: str, out: str | None, stem: str) -> None:
    """Draw a synthetic panel and write it with its truth sidecar."""
    config = DgpConfig.from_json(config_path)
    sim = simulate_panel(config)
    panel_path, truth_path = sim.export(_out_dir(out) / f"{stem}.csv")
    click.echo(f"wrote {panel_path} ({sim.panel.n_rows} students) and {truth_path}")
    click.echo(
        f"implied current-period reliability: {config.lambda_reliability():.6f}"
    )


def _fit_estimates(panel, strategy, outcome, ses, lag, degree):
    estimates = [ols_strategy(panel, outcome=outcome, ses=ses)]
    notes = []
    wanted = ("iv", "eiv-fs", "eiv-th") if strategy == "all" else (strategy,)
    if "iv" in wanted:
        estimates.append(iv_strategy(panel, outcome=outcome, ses=ses, lag=lag))
    if "eiv-fs" in wanted:
        estimates.append(eiv_fs_strategy(panel, outcome=outcome, ses=ses, lag=lag))
    if "eiv-th" in wanted:
        try:
            estimates.append(
                eiv_th_strategy(panel, outcome=outcome, ses=ses, degree=degree)
            )
        except TooFewLags as exc:
            if strategy != "all":
                raise
            notes.append(f"eiv_th skipped: {exc}")
    return estimates, notes


def _fig2_rows(estimates):
    rows = []
    for est in estimates:
        for parameter, value, se in (
            ("beta", est.beta_hat, est.se_beta),
            ("gamma", est.gamma_hat, est.se_gamma),
        ):
            low = value - Z_95 * se if se is not None else None
            high = value + Z_95 * se if se is not None else None
            rows.append((est.method, parameter, value, low, high))
    return rows


def _format_cell(value) -> str:
    return "" if value is None else repr(float(value))


@main.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--strategy", type=click.Choice(["ols", "iv", "eiv-fs", "eiv-th", "all"]),
    default="all", show_default=True,
)
@click.option("--degree", type=int, default=1, show_default=True,
              help="Polynomial degree for the reliability forecast.")
@click.option("--lag", type=int, default=1, show_default=True,
              help="Instrument lag depth for iv and eiv-fs.")
@click.option("--outcome", default="outcome", show_default=True)
@click.option("--ses", default="ses", show_default=True)
@click.option("--out", default=None, type=click.Path(file_okay=False))
@_handle_errors
def fit(input_path, strategy, degree, lag, outcome, ses, out) -> None:
    """Estimate the conditional gap on a panel CSV, by every strategy."""
    panel = read_panel_csv(input_path)
    estimates, notes = _fit_estimates(panel, strategy, outcome, ses, lag, degree)

    baseline = estimates[0].beta_hat
    shares = {}
    for est in estimates[1:]:
        try:
            shares[est.method] = share_explained(baseline, est.beta_hat)
        except ContaminaError:
            shares[est.method] = None

    out_dir = _out_dir(out)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": "fit",
        "metadata": _metadata(
            input=str(input_path),
            n_rows=panel.n_rows,
            n_clusters=panel.cluster_count(),
            cluster_correction="CR1",
            strategy=strategy,
            lag=lag,
            degree=degree,
        ),
        "estimates": [est.to_dict() for est in estimates],
        "shares": shares,
        "notes": notes,
    }
    report_path = out_dir / "fit_report.json"
    _write_json(report_path, payload)

    fig2_path = out_dir / "fig2_estimates.csv"
    lines = ["method,parameter,estimate,ci_low,ci_high"]
    for method, parameter, value, low, high in _fig2_rows(estimates):
        lines.append(
            f"{method},{parameter},{_format_cell(value)},"
            f"{_format_cell(low)},{_format_cell(high)}"
        )
    fig2_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    th = next((e for e in estimates if e.method == "eiv_th"), None)
    if th is not None:
        fig1_path = out_dir / "fig1_reliability_series.csv"
        lines = ["tau,pi_prime,se,fitted"]
        for point in th.details["series"]:
            lines.append(
                f"{point['tau']},{_format_cell(point['pi_prime'])},"
                f"{_format_cell(point['se'])},{_format_cell(point['fitted'])}"
            )
        fig1_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    for est in estimates:
        se_beta = f" (se {est.se_beta:.4f})" if est.se_beta is not None else ""
        lam = f" lambda={est.lambda_hat:.4f}" if est.lambda_hat is not None else ""
        click.echo(
            f"{est.method:8s} beta={est.beta_hat:+.4f}{se_beta} "
            f"gamma={est.gamma_hat:.4f}{lam}"
        )
    for note in notes:
        click.echo(f"note: {note}", err=True)
    click.echo(f"report: {report_path}")


@main.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--characteristic", "characteristics", multiple=True, default=("ses",),
    show_default=True, help="Columns to test score growth against (repeatable).",
)
@click.option("--significance", type=float, default=0.01, show_default=True)
@click.option("--out", default=None, type=click.Path(file_okay=False))
@_handle_errors
def diagnose(input_path, characteristics, significance, out) -> None:
    """Check whether score growth is balanced on student characteristics."""
    panel = read_panel_csv(input_path)
    report = delta_regressions(
        panel, tuple(characteristics), significance=significance
    )
    lead = characteristics[0]
    path_points = delta_path(panel, characteristic=lead)

    out_dir = _out_dir(out)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": "diagnose",
        "metadata": _metadata(
            input=str(input_path),
            n_rows=panel.n_rows,
            n_clusters=panel.cluster_count(),
            cluster_correction="CR1",
        ),
        "report": report.to_dict(),
        "path": {
            "characteristic": lead,
            "points": [dataclasses.asdict(p) for p in path_points],
        },
    }
    report_path = out_dir / "diagnose_report.json"
    _write_json(report_path, payload)

    fig3_path = out_dir / "fig3_drift_by_lag.csv"
    lines = [f"tau,alpha_{lead},se"]
    for point in path_points:
        lines.append(
            f"{point.tau},{_format_cell(point.alpha_hat)},{_format_cell(point.se)}"
        )
    fig3_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    for check in report.checks:
        click.echo(
            f"{check.flag.upper():4s} {check.characteristic}: "
            f"alpha={check.alpha_hat:+.4f} (se {check.se:.4f}, p {check.p_value:.4f})"
        )
    click.echo(f"report: {report_path}")


@main.command()
@click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False),
)
@click.option("--replications", "-R", required=True, type=int)
@click.option("--degree", type=int, default=1, show_default=True)
@click.option("--band", type=float, default=4.0, show_default=True,
              help="Allowed |mean - limit| in Monte Carlo standard errors.")
@click.option("--check/--no-check", default=True, show_default=True,
              help="Exit 4 when any estimand mean leaves the band.")
@click.option(
    "--predictions-override", type=click.Path(exists=True, dir_okay=False),
    default=None, help="JSON mapping estimand names to replacement limits.",
)
@click.option("--out", default=None, type=click.Path(file_okay=False))
@_handle_errors
def mc(config_path, replications, degree, band, check, predictions_override, out):
    """Verify the closed-form bias formulas by simulation."""
    config = DgpConfig.from_json(config_path)
    predictions = None
    if predictions_override is not None:
        override = json.loads(Path(predictions_override).read_text(encoding="utf-8"))
        if not isinstance(override, dict):
            raise InvalidConfig("predictions override must be a JSON object")
        predictions = closed_form_predictions(config, degree=degree)
        for name, value in override.items():
            if name not in predictions:
                raise InvalidConfig(f"unknown estimand in override: {name!r}")
            predictions[name] = value

    result = mc_run(
        config, replications, degree=degree, band=band, predictions=predictions
    )
    if not result.summary.reportable:
        click.echo(
            "note: fewer than 30 replications; summary marked not reportable",
            err=True,
        )

    out_dir = _out_dir(out)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": "mc",
        "metadata": _metadata(config=str(config_path)),
        "config": config.to_dict(),
        "summary": result.summary.to_dict(),
        "predictions": result.predictions,
    }
    summary_path = out_dir / "mc_summary.json"
    _write_json(summary_path, payload)
    result.draws.to_csv(out_dir / "mc_draws.csv", index=False)

    for name, s in result.summary.estimands.items():
        if s.predicted is None:
            click.echo(f"   -  {name:14s} mean={s.mean:+.5f} (no closed form)")
        else:
            mark = "ok" if s.within_band else "OUT"
            click.echo(
                f"  {mark:3s} {name:14s} mean={s.mean:+.5f} "
                f"limit={s.predicted:+.5f} z={s.z:+.2f}"
            )
    click.echo(f"summary: {summary_path}")

    if check and not result.summary.all_within_band:
        raise MismatchBeyondTolerance(
            "estimand means out of band: "
            + ", ".join(result.summary.out_of_band())
        )


def _merge_constants(base: dict, override: dict) -> dict:
    merged = {}
    for section, values in base.items():
        merged[section] = dict(values)
        if section in override:
            merged[section].update(override[section])
    return merged


def build_paper_checks(
    constants: dict, abs_tolerance: float, share_tolerance_pp: float
) -> list[dict]:
    """Re-derive each published headline number from the others.

    Coefficient-scale identities use ``abs_tolerance``; percent-scale
    quantities use ``share_tolerance_pp``. Range checks measure the distance
    outside the published range.
    """
    med = constants["medium"]
    iv = constants["iv"]
    fs = constants["eiv_fs"]
    th = constants["eiv_th"]
    sh = constants["shares"]
    di = constants["diagnostics"]
    checks: list[dict] = []

    def add(name, published, recomputed, tolerance):
        diff = abs(published - recomputed)
        checks.append(
            {
                "name": name,
                "published": published,
                "recomputed": recomputed,
                "diff": diff,
                "tolerance": tolerance,
                "ok": diff <= tolerance,
            }
        )

    def add_range(name, low, high, recomputed, tolerance):
        if recomputed < low:
            diff = low - recomputed
        elif recomputed > high:
            diff = recomputed - high
        else:
            diff = 0.0
        checks.append(
            {
                "name": name,
                "published": [low, high],
                "recomputed": recomputed,
                "diff": diff,
                "tolerance": tolerance,
                "ok": diff <= tolerance,
            }
        )

    add("gamma_iv_equals_theta1_over_pi", iv["gamma_iv"],
        iv["theta1_hat"] / iv["pi_hat"], abs_tolerance)
    add(
        "beta_iv_identity",
        iv["beta_iv"],
        med["beta_m"] - (iv["gamma_iv"] - med["gamma_m"]) * med["delta_m"],
        abs_tolerance,
    )
    lambda_fs = iv["pi_hat"] * iv["variance_ratio"]
    add("lambda_fs_equals_adjusted_first_stage", fs["lambda_hat"], lambda_fs,
        abs_tolerance)
    beta_fs, gamma_fs = eiv_correct(
        med["beta_m"], med["gamma_m"], med["delta_m"], lambda_fs
    )
    add("beta_eiv_fs", fs["beta_hat"], beta_fs, abs_tolerance)
    add("gamma_eiv_fs", fs["gamma_hat"], gamma_fs, abs_tolerance)
    beta_th, gamma_th = eiv_correct(
        med["beta_m"], med["gamma_m"], med["delta_m"], th["lambda_hat"]
    )
    add("beta_eiv_th", th["beta_hat"], beta_th, abs_tolerance)
    add("gamma_eiv_th", th["gamma_hat"], gamma_th, abs_tolerance)

    add(
        "share_iv",
        sh["iv_pct"],
        share_explained(med["beta_m"], iv["beta_iv"]),
        share_tolerance_pp,
    )
    add_range(
        "share_eiv_fs_in_range", sh["range_low_pct"], sh["range_high_pct"],
        share_explained(med["beta_m"], beta_fs), share_tolerance_pp,
    )
    add_range(
        "share_eiv_th_in_range", sh["range_low_pct"], sh["range_high_pct"],
        share_explained(med["beta_m"], beta_th), share_tolerance_pp,
    )
    add(
        "diagnostic_reduction_pct",
        di["reduction_pct"],
        100.0 * (1.0 - di["alpha_ses"] / med["delta_m"]),
        share_tolerance_pp,
    )
    return checks


@main.command("paper-check")
@click.option(
    "--constants", "constants_path", default=None,
    type=click.Path(exists=True, dir_okay=False),
    help="JSON file overriding published constants, by section.",
)
@click.option("--abs-tolerance", type=float, default=0.0005, show_default=True)
@click.option("--share-tolerance-pp", type=float, default=1.0, show_default=True)
@click.option("--out", default=None, type=click.Path(file_okay=False))
@_handle_errors
def paper_check(constants_path, abs_tolerance, share_tolerance_pp, out) -> None:
    """Confirm the published headline numbers are internally consistent."""
    constants = PUBLISHED
    if constants_path is not None:
        override = json.loads(Path(constants_path).read_text(encoding="utf-8"))
        if not isinstance(override, dict):
            raise InvalidConfig("constants override must be a JSON object")
        unknown = set(override) - set(PUBLISHED)
        if unknown:
            raise InvalidConfig(f"unknown constants sections: {sorted(unknown)}")
        constants = _merge_constants(PUBLISHED, override)

    checks = build_paper_checks(constants, abs_tolerance, share_tolerance_pp)
    all_ok = all(c["ok"] for c in checks)

    out_dir = _out_dir(out)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": "paper-check",
        "metadata": _metadata(constants_version=CONSTANTS_VERSION),
        "checks": checks,
        "all_ok": all_ok,
    }
    report_path = out_dir / "paper_check.json"
    _write_json(report_path, payload)

    for c in checks:
        mark = "OK " if c["ok"] else "MISMATCH"
        click.echo(
            f"{mark} {c['name']}: published={c['published']} "
            f"recomputed={c['recomputed']:.6f} diff={c['diff']:.6f}"
        )
    click.echo(f"report: {report_path}")
    if not all_ok:
        failed = [c["name"] for c in checks if not c["ok"]]
        raise MismatchBeyondTolerance(
            "published values inconsistent: " + ", ".join(failed)
        )


if __name__ == "__main__":
    main()
