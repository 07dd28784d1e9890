#!/usr/bin/env python3
"""
impact_study.py

Description:
    Command-line driver for the price impact study. It turns raw tick tapes into
    processed tapes, measures impact curves, lag responses and sign correlations,
    fits the impact, correlation and volume-law exponents, inverts the
    propagator kernel, compares per-firm costs, and runs the shuffled firm-ID
    null model. It can also generate synthetic tapes with known ground truth.

    Every subcommand writes its products into --out DIR and always leaves a
    machine-readable summary.json there, also when a stage fails (the failing
    stage is named in "failed_stage"). The study command additionally saves a
    markdown summary, summary.md.

Usage:
    $ ./impact_study.py ingest data/raw_sample.csv --out out/ingest --stock-label TEF
    $ ./impact_study.py simulate data/example_manifest.json --out out/sim
    $ ./impact_study.py study out/sim/TEF-SYN.tape.csv --out out/study --config data/study_config.json
    $ ./impact_study.py shuffle out/sim/TEF-SYN.tape.csv --out out/null --seed 7 --replicates 50
    $ ./impact_study.py invert out/sim/TEF-SYN.tape.csv --out out/kernel --L-max 200
    $ ./impact_study.py fit out/sim/TEF-SYN.tape.csv --out out/fits

    Every numeric flag mirrors a StudyConfig field; --config FILE loads a JSON
    config first and the flags override it.

Exit codes:
    0 success, 1 usage or configuration error, 2 data error, 3 numerical failure.

Dependencies:
    numpy, scipy, pandas

Notes:
    - Randomized commands (study with the null stage, shuffle) need a seed, from
      --seed or the config file. Simulate uses the manifest seed unless --seed
      overrides it.
    - Reruns with the same inputs, config and seed write byte-identical files.
"""

import argparse
import logging
import sys
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd

from errors import ConfigError, DataError, EmptyTapeError, NumericalError, StudyError
from fit import (
    MIN_FIT_POINTS,
    FirmSummary,
    constraint_relation,
    cross_firm_statistics,
    fit_constraint,
    fit_correlation_exponent,
    fit_power_law,
    one_tick_bps,
    predicted_mean_impact,
    scaling_function_fit,
    usable_points,
)
from measure import (
    MARKET,
    correlation_by_firm,
    factorization_check,
    impact_curve,
    mean_impact,
    mean_volume,
    response,
    response_by_firm,
    sign_correlation,
    volume_distribution,
)
from nullmodel import impact_exponent_estimator, null_band
from propagator import (
    cost_from_series,
    critical_beta,
    invert_kernel,
    kappa_chi_study,
    reconstruct_response,
)
from reports import (
    firm_summary_frame,
    lag_table_frame,
    write_frame,
    write_json,
    write_rows,
    write_summary_markdown,
)
from study_config import StudyConfig
from synth import SyntheticManifest, emit_raw, simulate
from tape import (
    RawSchema,
    aggregate,
    build_tape,
    filter_mismatches,
    mean_log_spread,
    read_raw,
    read_tape,
    records_as_trades,
    write_tape,
)

logger = logging.getLogger(__name__)

SUMMARY_JSON = "summary.json"
SUMMARY_MD = "summary.md"
COMMAND_STAGES = {
    "fit": ("impact", "lags", "volumes"),
    "invert": ("lags", "kernel"),
    "shuffle": ("impact", "null"),
}


class StageSkipped(Exception):
    """Raised inside a stage when the tape cannot support it; the reason is recorded."""


class UsageErrorParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class Run:
    """Tracks the current stage and the summary of one command."""

    def __init__(self, command, out_dir):
        self.command = command
        self.out_dir = Path(out_dir)
        self.current = None
        self.summary = {"command": command, "status": "running", "completed_stages": [], "skipped_stages": {}}

    @contextmanager
    def stage(self, name):
        self.current = name
        print(f"Running stage: {name}")
        try:
            yield
        except StageSkipped as e:
            self.skip(name, str(e))
        else:
            self.summary["completed_stages"].append(name)
        self.current = None

    def skip(self, name, reason):
        logger.warning("Skipping stage %s: %s", name, reason)
        print(f"Skipping stage: {name} ({reason})")
        self.summary["skipped_stages"][name] = reason

    def path(self, name):
        return self.out_dir / name

    def finish(self):
        self.summary["status"] = "ok"
        self.summary["exit_code"] = 0
        return write_json(self.summary, self.path(SUMMARY_JSON))

    def fail(self, error, exit_code):
        self.summary["status"] = "failed"
        self.summary["exit_code"] = exit_code
        self.summary["failed_stage"] = self.current or "setup"
        self.summary["error"] = str(error)
        return write_json(self.summary, self.path(SUMMARY_JSON))


def _add_config_flags(parser):
    parser.add_argument('--config', type=str, help='JSON file with StudyConfig fields; flags override it.')
    parser.add_argument('--out', type=str, required=True, help='Output directory for all products.')
    parser.add_argument('--verbose', action='store_true', help='Log at DEBUG level.')
    parser.add_argument('--seed', type=int, help='Seed for randomized stages.')
    parser.add_argument('--quote-mode', dest='quote_mode', choices=['price', 'logmid'])
    parser.add_argument('--delimiter', type=str)
    parser.add_argument('--stock-label', dest='stock_label', type=str, help='Stock label for the output tape.')
    parser.add_argument('--mean-spread', dest='mean_spread', type=float,
                        help='Mean log spread <s>; overrides the tape header or the raw-file estimate.')
    parser.add_argument('--activity-floor', dest='activity_floor', type=int)
    parser.add_argument('--mismatch-threshold', dest='mismatch_threshold', type=float)
    parser.add_argument('--max-row-errors', dest='max_row_errors', type=int)
    parser.add_argument('--n-bins', dest='n_bins', type=int)
    parser.add_argument('--min-bin-count', dest='min_bin_count', type=int)
    parser.add_argument('--lag-horizon', dest='lag_horizon', type=int)
    parser.add_argument('--min-response-samples', dest='min_response_samples', type=int)
    parser.add_argument('--lag-method', dest='lag_method', choices=['direct', 'fft'])
    parser.add_argument('--L-max', dest='L_max', type=int)
    parser.add_argument('--horizon', type=int, help='Tail horizon H of the kernel inversion (default 4 L_max).')
    parser.add_argument('--ridge', type=float)
    parser.add_argument('--coincident-term', dest='coincident_term', action=argparse.BooleanOptionalAction,
                        default=None)
    parser.add_argument('--extrapolation', choices=['hold-last', 'power-tail'])
    parser.add_argument('--impact-fit-window', dest='impact_fit_window', type=float, nargs=2, metavar=('LO', 'HI'))
    parser.add_argument('--correlation-fit-window', dest='correlation_fit_window', type=float, nargs=2,
                        metavar=('LO', 'HI'))
    parser.add_argument('--kernel-fit-window', dest='kernel_fit_window', type=float, nargs=2, metavar=('LO', 'HI'))
    parser.add_argument('--unconstrained-volume-fit', dest='volume_gamma_constrained', action='store_const',
                        const=False, default=None)
    parser.add_argument('--V0', dest='V0', type=float)
    parser.add_argument('--Delta0', dest='Delta0', type=float)
    parser.add_argument('--replicates', dest='n_replicates', type=int)
    parser.add_argument('--band-sigma', dest='band_sigma', type=float)
    parser.add_argument('--band-overlap-stderr', dest='band_overlap_stderr', action='store_const', const=True,
                        default=None, help='Count a firm outside only when its own standard error misses the band too.')
    parser.add_argument('--include-zero-lag', dest='include_zero_lag', action='store_const', const=True,
                        default=None)
    parser.add_argument('--connected-correlation', dest='connected_correlation', action='store_const',
                        const=True, default=None)
    parser.add_argument('--workers', type=int)
    parser.add_argument('--factorization-lags', dest='factorization_lags', type=int, nargs='+')
    parser.add_argument('--tick-size', dest='tick_size', type=float)


def parse_arguments(argv=None):
    parser = UsageErrorParser(description='Price impact study: ingest, measure, fit, invert and test trade tapes.')
    commands = parser.add_subparsers(dest='command', required=True)

    ingest = commands.add_parser('ingest', help='Parse, aggregate and filter a raw tape into a processed tape.')
    ingest.add_argument('input', type=str, help='Raw (or processed) tape file.')
    ingest.add_argument('--format', choices=['raw', 'processed'], default='raw')
    ingest.add_argument('--compare-raw', action='store_true',
                        help='Also fit alpha_M on the unaggregated records to exhibit the raw-vs-processed gap.')

    study = commands.add_parser('study', help='Run the full study on a processed tape.')
    study.add_argument('input', type=str, help='Processed tape file.')
    study.add_argument('--stages', type=str, nargs='+', help='Subset of study stages to run.')

    simulate_cmd = commands.add_parser('simulate', help='Generate a synthetic tape from a manifest.')
    simulate_cmd.add_argument('input', type=str, help='Manifest JSON file.')
    simulate_cmd.add_argument('--n-trades', dest='n_trades', type=int, help='Override the manifest trade count.')
    simulate_cmd.add_argument('--raw', action='store_true', help='Also emit a raw-format tape.')

    for name, text in (('shuffle', 'Firm-ID shuffling null band.'),
                       ('invert', 'Invert the propagator kernel.'),
                       ('fit', 'Fit impact, correlation and volume-law exponents.')):
        sub = commands.add_parser(name, help=text)
        sub.add_argument('input', type=str, help='Processed tape file.')

    for sub in commands.choices.values():
        _add_config_flags(sub)
    return parser.parse_args(argv)


def build_config(args):
    config = StudyConfig.load(args.config) if args.config else StudyConfig()
    names = {f for f in config.to_dict()}
    overrides = {k: v for k, v in vars(args).items() if k in names and v is not None}
    overrides["out_dir"] = args.out
    overrides["inputs"] = (args.input,)
    if getattr(args, "stages", None):
        overrides["stages"] = tuple(args.stages)
    elif args.command in COMMAND_STAGES:
        overrides["stages"] = COMMAND_STAGES[args.command]
    return config.merged(**overrides).validate()


def _config_record(config):
    """Config as recorded in summary.json; the output directory is left out so reruns compare equal."""
    record = config.to_dict()
    record.pop("out_dir", None)
    return record


def load_tape(path, config, stock_label=None):
    try:
        return read_tape(path, mean_spread=config.mean_spread, stock_label=stock_label)
    except FileNotFoundError as e:
        raise DataError(f"tape file not found: {path}") from e
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def _market_alpha(tape, config):
    curve = impact_curve(tape, MARKET, n_bins=config.n_bins, min_bin_count=config.min_bin_count)
    return curve, fit_power_law(curve, window=config.impact_fit_window)


def _require_fit_points(curve, window, what):
    n = usable_points(curve, window)
    if n < MIN_FIT_POINTS:
        raise StageSkipped(f"{what} has {n} usable points, a power-law fit needs {MIN_FIT_POINTS}")


def _require_horizon(tape, horizon, what):
    if horizon >= tape.n:
        raise StageSkipped(f"{what} {horizon} reaches past the {tape.n}-trade tape")


def cmd_ingest(args, config, run):
    label = args.stock_label or Path(args.input).name.split(".")[0]
    if args.format == "processed":
        with run.stage("load"):
            tape = load_tape(args.input, config, stock_label=args.stock_label)
        with run.stage("write"):
            tape_path = write_tape(tape, run.path(f"{tape.stock_label}.tape.csv"))
        run.summary.update({"stock_label": tape.stock_label, "n_trades": tape.n, "tape": tape_path.name,
                            "format": "processed"})
        print(f"Passed through {tape.n} processed trades to {tape_path}")
        return

    with run.stage("parse"):
        schema = RawSchema(delimiter=config.delimiter, quote_mode=config.quote_mode)
        try:
            parsed = read_raw(args.input, schema=schema, max_row_errors=config.max_row_errors)
        except FileNotFoundError as e:
            raise DataError(f"raw tape not found: {args.input}") from e
        if parsed.errors:
            write_rows(run.path("row_errors.csv"), ["line", "column", "value", "message"],
                       [(e.line, e.column, e.value, e.message) for e in parsed.errors])
        if not parsed.records:
            raise EmptyTapeError(f"{args.input}: no valid records")
        mean_spread = config.mean_spread or mean_log_spread(parsed.records, config.quote_mode)

    with run.stage("aggregate"):
        trades = aggregate(parsed.records, config.quote_mode)
        kept, dropped_fraction = filter_mismatches(trades, config.mismatch_threshold)
        tape = build_tape(kept, label, mean_spread)
        tape_path = write_tape(tape, run.path(f"{label}.tape.csv"))

    report = {
        "stock_label": label,
        "format": "raw",
        "n_records": len(parsed.records),
        "n_row_errors": len(parsed.errors),
        "n_trades_aggregated": len(trades),
        "n_trades": tape.n,
        "dropped_fraction": dropped_fraction,
        "mismatch_threshold": config.mismatch_threshold,
        "mean_spread": mean_spread,
        "quote_mode": config.quote_mode,
        "tape": tape_path.name,
    }
    if args.compare_raw:
        with run.stage("compare-raw"):
            report["comparison"] = compare_raw_processed(parsed.records, tape, label, mean_spread, config)
    write_json(report, run.path("ingest_report.json"))
    run.summary.update(report)
    print(f"Aggregated {len(parsed.records)} records into {tape.n} trades "
          f"({100 * dropped_fraction:.2f}% dropped as mismatches); tape saved to {tape_path}")


def compare_raw_processed(records, tape, label, mean_spread, config):
    """alpha_M fitted on the records taken one by one and on the processed tape."""
    raw_trades, _ = filter_mismatches(records_as_trades(records, config.quote_mode), config.mismatch_threshold)
    raw_tape = build_tape(raw_trades, f"{label}-raw", mean_spread)
    comparison = {}
    for name, candidate in (("raw", raw_tape), ("processed", tape)):
        try:
            _, fit = _market_alpha(candidate, config)
            comparison[name] = {"alpha_M": fit.exponent, "stderr": fit.stderr_exponent, "n_trades": candidate.n}
        except NumericalError as e:
            logger.warning("No alpha_M for the %s tape: %s", name, e)
            comparison[name] = {"alpha_M": None, "stderr": None, "n_trades": candidate.n, "note": str(e)}
    return comparison


def cmd_simulate(args, config, run):
    with run.stage("manifest"):
        try:
            manifest = SyntheticManifest.load(args.input)
        except FileNotFoundError as e:
            raise DataError(f"manifest not found: {args.input}") from e
        if args.seed is not None:
            manifest = replace(manifest, seed=args.seed)
        if args.n_trades is not None:
            manifest = replace(manifest, n_trades=args.n_trades)
        manifest.validate()

    with run.stage("simulate"):
        tape = simulate(manifest)
        tape_path = write_tape(tape, run.path(f"{manifest.stock_label}.tape.csv"))
        manifest_path = manifest.save(run.path("manifest.json"))
    run.summary.update({"stock_label": manifest.stock_label, "n_trades": tape.n, "seed": manifest.seed,
                        "tape": tape_path.name, "manifest": manifest_path.name})
    if args.raw:
        with run.stage("raw"):
            raw_path = emit_raw(tape, manifest, run.path(f"{manifest.stock_label}.raw.csv"))
        run.summary["raw"] = raw_path.name
    print(f"Simulated {tape.n} trades; tape saved to {tape_path}")


def summarize_firms(tape, firms, config, volume_gamma, run):
    """FirmSummary per firm above the floor; firms whose fit fails keep alpha = None."""
    participation = tape.participation()
    counts = tape.trade_counts()
    summaries, curves = [], []
    for firm in firms:
        curve = impact_curve(tape, firm, n_bins=config.n_bins, min_bin_count=config.min_bin_count,
                             activity_floor=config.activity_floor)
        frame = curve.to_frame()
        frame.insert(0, "firm", int(firm))
        curves.append(frame)
        summary = FirmSummary(
            firm=int(firm), stock_label=tape.stock_label, pi=participation[firm], n_trades=counts[firm],
            mean_volume=mean_volume(tape, firm), mean_impact=mean_impact(tape, firm),
        )
        try:
            fit = fit_power_law(curve, window=config.impact_fit_window)
        except NumericalError as e:
            logger.warning("Firm %s: no impact exponent: %s", firm, e)
            run.summary.setdefault("firm_fit_failures", {})[str(firm)] = str(e)
        else:
            summary.alpha, summary.c, summary.stderr_alpha = fit.exponent, fit.coefficient, fit.stderr_exponent
            if volume_gamma is not None:
                try:
                    summary.predicted_impact = predicted_mean_impact(fit.coefficient, fit.exponent,
                                                                     summary.mean_volume, volume_gamma)
                except NumericalError as e:
                    logger.warning("Firm %s: no predicted impact: %s", firm, e)
        summaries.append(summary)
    return summaries, curves


def tick_check(tape, config, fitted_delta0=None):
    """Delta0 against the bps of the spread one tick of the book is worth."""
    tick = one_tick_bps(config.tick_size, tape.sigma)
    return {
        "tick_size": config.tick_size,
        "one_tick_bps": tick,
        "Delta0": config.Delta0,
        "Delta0_in_ticks": config.Delta0 / tick,
        "fitted_Delta0": fitted_delta0,
        "fitted_Delta0_in_ticks": None if fitted_delta0 is None else fitted_delta0 / tick,
    }


def cmd_study(args, config, run):
    stages = config.stages
    if "null" in stages and config.seed is None:
        raise ConfigError("the null stage is randomized; pass --seed or set seed in the config")

    with run.stage("load"):
        tape = load_tape(args.input, config, stock_label=args.stock_label)
    headline = {}
    run.summary.update({"stock_label": tape.stock_label, "n_trades": tape.n, "seed": config.seed,
                        "config": _config_record(config), "headline": headline})
    floor_firms = tape.firms_above(config.activity_floor)
    run.summary["n_firms_above_floor"] = len(floor_firms)
    if not floor_firms:
        logger.warning("No firm on %s reaches the activity floor of %d", tape.stock_label, config.activity_floor)
    fits = {}
    results = {}

    if "impact" in stages:
        with run.stage("impact"):
            curve = impact_curve(tape, MARKET, n_bins=config.n_bins, min_bin_count=config.min_bin_count)
            _require_fit_points(curve, config.impact_fit_window, "the market impact curve")
            fit = fit_power_law(curve, window=config.impact_fit_window)
            write_frame(curve.to_frame(), run.path("impact_curve_market.csv"))
            fits["alpha_M"] = fit
            headline.update(alpha_M=fit.exponent, stderr_alpha_M=fit.stderr_exponent,
                            mean_impact=mean_impact(tape), mean_volume=mean_volume(tape))

    if "lags" in stages:
        with run.stage("lags"):
            _require_horizon(tape, config.lag_horizon, "lag horizon L =")
            R = response(tape, L=config.lag_horizon, min_response_samples=config.min_response_samples,
                         method=config.lag_method)
            C = sign_correlation(tape, L=config.lag_horizon, min_response_samples=config.min_response_samples,
                                 method=config.lag_method, connected=config.connected_correlation)
            _require_fit_points(C, config.correlation_fit_window, "the sign correlation")
            write_frame(R.to_frame(), run.path("response_market.csv"))
            write_frame(C.to_frame(), run.path("correlation_market.csv"))
            gamma_fit = fit_correlation_exponent(C, window=config.correlation_fit_window)
            fits["gamma"] = gamma_fit
            headline["gamma"] = gamma_fit.exponent
            costs = cost_from_series(R, C, config.lag_horizon, config.include_zero_lag)
            run.summary["market_costs"] = costs.to_dict()
            results["R"], results["C"] = R, C

    if "volumes" in stages:
        with run.stage("volumes"):
            dist = volume_distribution(tape, n_bins=config.n_bins)
            write_frame(dist.to_frame(), run.path("volume_distribution.csv"))
            volume_fit = scaling_function_fit(dist, constrained=config.volume_gamma_constrained)
            fits["volume_law"] = volume_fit
            headline["volume_gamma"] = volume_fit.gamma

    firms = []
    if "firms" in stages:
        if not floor_firms:
            run.skip("firms", f"no firm reaches the activity floor of {config.activity_floor}")
        else:
            with run.stage("firms"):
                volume_gamma = fits["volume_law"].gamma if "volume_law" in fits else None
                firms, curves = summarize_firms(tape, floor_firms, config, volume_gamma, run)
                write_frame(pd.concat(curves, ignore_index=True), run.path("impact_curves_firms.csv"))
                market = {tape.stock_label: headline["alpha_M"]} if "alpha_M" in headline else {}
                statistics = cross_firm_statistics(firms, market)
                headline["alpha_bar"] = statistics.alpha_bar.get(tape.stock_label)
                run.summary["cross_firm"] = asdict(statistics)
                residuals = constraint_relation(firms, config.V0, config.Delta0)
                write_rows(run.path("constraint_residuals.csv"), ["firm", "residual"],
                           [(firm, float(value)) for firm, value in sorted(residuals.residuals.items())])
                run.summary["constraint"] = {"V0": residuals.V0, "Delta0": residuals.Delta0, "rms": residuals.rms}
                try:
                    run.summary["constraint_fit"] = asdict(fit_constraint(firms))
                except NumericalError as e:
                    run.summary["constraint_fit"] = {"note": str(e)}
                if config.tick_size is not None:
                    fits["tick_check"] = tick_check(tape, config, run.summary["constraint_fit"].get("Delta0"))
                    run.summary["tick_check"] = fits["tick_check"]

    kernel = None
    if "kernel" in stages:
        with run.stage("kernel"):
            _require_horizon(tape, config.H, "inversion horizon H =")
            R_k = response(tape, L=config.L_max, min_response_samples=config.min_response_samples,
                           method=config.lag_method)
            C_k = sign_correlation(tape, L=config.H, min_response_samples=config.min_response_samples,
                                   method=config.lag_method, connected=config.connected_correlation)
            kernel = invert_kernel(R_k, C_k, L_max=config.L_max, H=config.H, ridge=config.ridge,
                                   coincident=config.coincident_term, fit_window=config.kernel_window,
                                   extrapolation=config.extrapolation)
            write_frame(kernel.to_frame(), run.path("kernel.csv"))
            model = reconstruct_response(kernel, C_k, float(R_k.values[0]), L=config.L_max, H=config.H,
                                         coincident=config.coincident_term)
            write_frame(pd.DataFrame({"lag": R_k.lags, "measured": R_k.values, "reconstructed": model.values}),
                        run.path("response_model.csv"))
            if kernel.fit is not None:
                fits["kernel"] = kernel.fit
                headline["beta"] = kernel.fit.exponent
            if "gamma" in headline:
                try:
                    headline["beta_c"] = critical_beta(headline["gamma"])
                except NumericalError as e:
                    run.summary["beta_c_note"] = str(e)

    if "costs" in stages:
        usable = [f.firm for f in firms]
        if kernel is None:
            run.skip("costs", "needs the kernel stage")
        elif not usable:
            run.skip("costs", "needs firms above the activity floor")
        elif config.lag_horizon >= tape.n:
            run.skip("costs", f"lag horizon L = {config.lag_horizon} reaches past the {tape.n}-trade tape")
        else:
            with run.stage("costs"):
                depth = max(config.lag_horizon, config.H)
                responses = response_by_firm(tape, config.lag_horizon, config.min_response_samples)
                correlations = correlation_by_firm(tape, depth, config.min_response_samples)
                study = kappa_chi_study(
                    tape, usable, kernel, L=config.lag_horizon, H=config.H, coincident=config.coincident_term,
                    include_zero=config.include_zero_lag, min_response_samples=config.min_response_samples,
                    response_table=responses, correlation_table=correlations,
                )
                write_frame(study.table, run.path("kappa_chi.csv"))
                run.summary["kappa_chi_trends"] = study.trends
                run.summary["firm_reconstruction_residual"] = study.reconstruction.residual()
                if study.flagged:
                    run.summary["kappa_chi_note"] = study.flagged
                by_firm = study.table.set_index("firm")
                for summary in firms:
                    summary.kappa = float(by_firm.loc[summary.firm, "kappa_measured"])
                    summary.chi = float(by_firm.loc[summary.firm, "chi"])
                write_frame(lag_table_frame(responses), run.path("response_firms.csv"))
                correlation_residual = correlations.decomposition_residual()[: config.lag_horizon + 1]
                write_frame(pd.DataFrame({
                    "lag": np.arange(config.lag_horizon + 1),
                    "response_residual": responses.decomposition_residual(),
                    "correlation_residual": correlation_residual,
                }), run.path("decomposition.csv"))

    if firms:
        write_frame(firm_summary_frame(firms), run.path("firm_summary.csv"))

    if "null" in stages:
        candidates = [f.firm for f in firms if f.fitted] if firms else floor_firms
        if not candidates:
            run.skip("null", "no firm with an impact exponent above the activity floor")
        else:
            with run.stage("null"):
                report = null_band(
                    tape, config.n_replicates, config.seed,
                    estimator=impact_exponent_estimator(config.n_bins, config.min_bin_count,
                                                        config.impact_fit_window),
                    firms=candidates, activity_floor=config.activity_floor, band_sigma=config.band_sigma,
                    workers=config.workers, market_alpha=headline.get("alpha_M"),
                    overlap_stderr=config.band_overlap_stderr,
                )
                write_json(report.to_dict(), run.path("null_band.json"))
                run.summary["null_band"] = {
                    "seed": report.seed, "rng": report.rng, "n_replicates": report.n_replicates,
                    "exceedance_fraction": report.exceedance_fraction, "band_sigma": report.band_sigma,
                    "overlap_stderr": report.overlap_stderr,
                    "pooled_mean": report.pooled[0], "pooled_std": report.pooled[1],
                    "n_failures": len(report.failures),
                }

    if "factorization" in stages:
        lags = [lag for lag in config.factorization_lags if lag < tape.n]
        if not lags:
            run.skip("factorization", f"every factorization lag reaches past the {tape.n}-trade tape")
        else:
            with run.stage("factorization"):
                check = factorization_check(tape, lags, config.n_bins, config.min_bin_count)
                write_frame(check.to_frame(), run.path("factorization.csv"))
                run.summary["factorization_max_log_ratio"] = check.summary

    write_json({name: fit for name, fit in fits.items()}, run.path("fits.json"))


def _summary_markdown(run):
    text = write_summary_markdown(run.summary, run.path(SUMMARY_MD))
    print(text)
    print(f"Summary saved to {run.path(SUMMARY_MD)}")


COMMANDS = {
    "ingest": cmd_ingest,
    "study": cmd_study,
    "simulate": cmd_simulate,
    "shuffle": cmd_study,
    "invert": cmd_study,
    "fit": cmd_study,
}


def main(argv=None):
    args = parse_arguments(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    run = Run(args.command, args.out)
    try:
        run.out_dir.mkdir(parents=True, exist_ok=True)
        config = build_config(args)
        COMMANDS[args.command](args, config, run)
    except StudyError as e:
        print(f"Error: {run.current or 'setup'}: {e}", file=sys.stderr)
        run.fail(e, e.exit_code)
        if args.command == "study":
            write_summary_markdown(run.summary, run.path(SUMMARY_MD))
        return e.exit_code
    except OSError as e:
        print(f"Error: {run.current or 'setup'}: {e}", file=sys.stderr)
        run.fail(e, DataError.exit_code)
        return DataError.exit_code

    run.finish()
    if args.command == "study":
        _summary_markdown(run)
    return 0


if __name__ == '__main__':
    sys.exit(main())
