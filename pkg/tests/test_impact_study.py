import filecmp
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fit import volume_law_ppf
from impact_study import main
from study_config import StudyConfig
from synth import SyntheticManifest, emit_raw, simulate
from tape import Tape, read_tape, write_tape

STUDY_FLAGS = ["--activity-floor", "1000", "--lag-horizon", "200", "--L-max", "50", "--horizon", "400",
               "--min-response-samples", "10", "--replicates", "10"]


def read_summary(out_dir):
    with open(out_dir / "summary.json") as handle:
        return json.load(handle)


@pytest.fixture
def tape_path(tmp_path, small_tape):
    return write_tape(small_tape, tmp_path / "TST.tape.csv")


@pytest.fixture
def tiny_tape_path(tmp_path):
    n = 100
    sign = np.where((np.arange(n) // 20) % 2 == 0, 1, -1)
    volume = 1000.0 * volume_law_ppf((np.arange(n) + 0.5) / n, 2.95)
    tape = Tape.from_arrays("TINY", 0.001, np.arange(n) % 4 + 1, sign, volume, np.zeros(n), sign * 1e-4)
    return write_tape(tape, tmp_path / "TINY.tape.csv")


def test_ingest_raw_sample(tmp_path, raw_sample_path):
    out = tmp_path / "ingest"
    assert main(["ingest", str(raw_sample_path), "--out", str(out), "--stock-label", "TEF"]) == 0

    with open(out / "ingest_report.json") as handle:
        report = json.load(handle)
    assert report["n_records"] == 5
    assert report["n_trades_aggregated"] == 3
    assert report["n_trades"] == 3
    assert report["dropped_fraction"] == 0.0
    assert report["tape"] == "TEF.tape.csv"
    assert not (out / "row_errors.csv").exists()

    tape = read_tape(out / "TEF.tape.csv")
    assert list(tape.trigger_id) == [9575, 9403, 9403]
    assert tape.volume[1] == 300 * 17.25

    summary = read_summary(out)
    assert summary["status"] == "ok"
    assert summary["completed_stages"] == ["parse", "aggregate"]


def test_ingest_collects_row_errors(tmp_path, raw_sample_path):
    raw = tmp_path / "raw.csv"
    raw.write_text(raw_sample_path.read_text() + "2780,9403,9575,1,lots,17.25,7.454,7.455\n")
    out = tmp_path / "ingest"
    assert main(["ingest", str(raw), "--out", str(out)]) == 0
    assert (out / "raw.tape.csv").exists()
    rows = (out / "row_errors.csv").read_text().splitlines()
    assert rows[0] == "line,column,value,message"
    assert rows[1].startswith("7,shares,lots,")


def test_ingest_row_error_budget_is_a_data_error(tmp_path, raw_sample_path):
    raw = tmp_path / "raw.csv"
    raw.write_text(raw_sample_path.read_text() + "2780,9403,9575,1,lots,17.25,7.454,7.455\n")
    out = tmp_path / "ingest"
    assert main(["ingest", str(raw), "--out", str(out), "--max-row-errors", "0"]) == 2
    assert read_summary(out)["failed_stage"] == "parse"


def test_ingest_zero_quote_is_a_row_error(tmp_path, raw_sample_path):
    raw = tmp_path / "raw.csv"
    raw.write_text(raw_sample_path.read_text() + "2780,9403,9575,1,10,17.25,0,7.455\n")
    out = tmp_path / "ingest"
    assert main(["ingest", str(raw), "--out", str(out)]) == 0
    rows = (out / "row_errors.csv").read_text().splitlines()
    assert rows[1].startswith("7,bid_quote,0,")
    assert read_summary(out)["n_trades"] == 3

    strict = tmp_path / "strict"
    assert main(["ingest", str(raw), "--out", str(strict), "--max-row-errors", "0"]) == 2
    assert read_summary(strict)["failed_stage"] == "parse"


def test_ingest_compare_raw(tmp_path, small_manifest):
    manifest = replace(small_manifest, n_trades=5000, fragment_prob=0.5)
    raw = emit_raw(simulate(manifest), manifest, tmp_path / "TST.raw.csv")
    out = tmp_path / "ingest"
    assert main(["ingest", str(raw), "--out", str(out), "--quote-mode", "logmid", "--n-bins", "10",
                 "--compare-raw"]) == 0
    with open(out / "ingest_report.json") as handle:
        report = json.load(handle)
    assert report["n_trades_aggregated"] == 5000
    assert report["n_records"] > 5000
    assert set(report["comparison"]) == {"raw", "processed"}
    assert report["comparison"]["raw"]["n_trades"] > report["comparison"]["processed"]["n_trades"]


def test_ingest_processed_passthrough(tmp_path, tape_path, small_tape):
    out = tmp_path / "pass"
    assert main(["ingest", str(tape_path), "--format", "processed", "--out", str(out)]) == 0
    assert read_tape(out / "TST.tape.csv").n == small_tape.n
    assert read_summary(out)["format"] == "processed"


def test_simulate_command(tmp_path, small_manifest):
    manifest_path = small_manifest.save(tmp_path / "manifest.json")
    out = tmp_path / "sim"
    assert main(["simulate", str(manifest_path), "--out", str(out), "--n-trades", "500", "--seed", "5",
                 "--raw"]) == 0
    assert read_tape(out / "TST.tape.csv").n == 500
    with open(out / "manifest.json") as handle:
        written = json.load(handle)
    assert written["seed"] == 5
    assert written["n_trades"] == 500
    assert (out / "TST.raw.csv").exists()
    assert read_summary(out)["seed"] == 5


def test_simulate_missing_manifest(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", str(tmp_path / "nope.json"), "--out", str(out)]) == 2


def test_full_study(tmp_path, tape_path):
    out = tmp_path / "study"
    assert main(["study", str(tape_path), "--out", str(out), "--seed", "7", *STUDY_FLAGS]) == 0

    summary = read_summary(out)
    assert summary["status"] == "ok"
    assert summary["completed_stages"] == ["load", "impact", "lags", "volumes", "firms", "kernel", "costs",
                                           "null", "factorization"]
    assert summary["n_firms_above_floor"] == 3
    assert "out_dir" not in summary["config"]
    assert summary["null_band"]["seed"] == 7
    assert summary["null_band"]["rng"] == "PCG64"
    assert 0.0 < summary["headline"]["alpha_M"] < 0.6
    assert summary["headline"]["volume_gamma"] > 2.0
    assert summary["firm_reconstruction_residual"] < 1e-10

    for name in ("impact_curve_market.csv", "response_market.csv", "correlation_market.csv",
                 "volume_distribution.csv", "impact_curves_firms.csv", "constraint_residuals.csv",
                 "kernel.csv", "response_model.csv", "kappa_chi.csv", "response_firms.csv",
                 "decomposition.csv", "firm_summary.csv", "null_band.json", "factorization.csv",
                 "fits.json", "summary.md"):
        assert (out / name).exists(), name

    with open(out / "fits.json") as handle:
        fits = json.load(handle)
    assert {"alpha_M", "gamma", "volume_law"} <= set(fits)
    assert (out / "summary.md").read_text().startswith("# Impact Study Summary")
    assert len((out / "firm_summary.csv").read_text().splitlines()) == 4


def test_study_compares_delta0_with_one_tick(tmp_path, tape_path):
    out = tmp_path / "study"
    assert main(["study", str(tape_path), "--out", str(out), *STUDY_FLAGS,
                 "--stages", "impact", "volumes", "firms", "--tick-size", "0.0005"]) == 0
    with open(out / "fits.json") as handle:
        check = json.load(handle)["tick_check"]
    sigma = read_tape(tape_path).sigma
    assert check["tick_size"] == 0.0005
    assert check["one_tick_bps"] == pytest.approx(0.5 * 0.0005 / sigma)
    assert check["Delta0_in_ticks"] == pytest.approx(StudyConfig().Delta0 / check["one_tick_bps"])
    assert read_summary(out)["tick_check"] == check
    assert "## Tick Size" in (out / "summary.md").read_text()


def test_study_without_tick_size_has_no_tick_check(tmp_path, tape_path):
    out = tmp_path / "study"
    assert main(["study", str(tape_path), "--out", str(out), *STUDY_FLAGS, "--stages", "volumes", "firms"]) == 0
    with open(out / "fits.json") as handle:
        assert "tick_check" not in json.load(handle)
    assert "## Tick Size" not in (out / "summary.md").read_text()


def test_study_reruns_are_byte_identical(tmp_path, tape_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        assert main(["study", str(tape_path), "--out", str(out), "--seed", "7", *STUDY_FLAGS]) == 0
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(first, second, names, shallow=False)
    assert mismatch == [] and errors == []


def test_tiny_tape_skips_stages_it_cannot_support(tmp_path, tiny_tape_path):
    out = tmp_path / "tiny"
    code = main(["study", str(tiny_tape_path), "--out", str(out), "--seed", "3",
                 "--stages", "lags", "firms", "costs", "null", "factorization",
                 "--lag-horizon", "20", "--min-response-samples", "10", "--correlation-fit-window", "1", "5",
                 "--factorization-lags", "150"])
    assert code == 0
    summary = read_summary(out)
    assert summary["completed_stages"] == ["load", "lags"]
    assert set(summary["skipped_stages"]) == {"firms", "costs", "null", "factorization"}
    assert summary["headline"]["gamma"] == pytest.approx(0.3, abs=0.2)
    assert "## Skipped Stages" in (out / "summary.md").read_text()


def test_tiny_tape_with_default_flags_runs_what_it_can(tmp_path, tiny_tape_path, caplog):
    out = tmp_path / "tiny"
    with caplog.at_level("WARNING"):
        assert main(["study", str(tiny_tape_path), "--out", str(out), "--seed", "3"]) == 0
    assert "activity floor" in caplog.text
    summary = read_summary(out)
    assert summary["status"] == "ok"
    assert summary["completed_stages"] == ["load", "volumes", "factorization"]
    skipped = summary["skipped_stages"]
    assert set(skipped) == {"impact", "lags", "firms", "kernel", "costs", "null"}
    assert "usable points" in skipped["impact"]
    assert "100-trade tape" in skipped["lags"]
    assert "100-trade tape" in skipped["kernel"]
    assert "activity floor" in skipped["firms"]
    assert not (out / "impact_curve_market.csv").exists()
    assert (out / "volume_distribution.csv").exists()


def test_study_without_seed_is_a_config_error(tmp_path, tape_path):
    out = tmp_path / "study"
    assert main(["study", str(tape_path), "--out", str(out)]) == 1
    summary = read_summary(out)
    assert summary["status"] == "failed"
    assert summary["failed_stage"] == "setup"
    assert summary["exit_code"] == 1
    assert "Failed Stage Details" in (out / "summary.md").read_text()


def test_study_missing_tape_is_a_data_error(tmp_path):
    out = tmp_path / "study"
    assert main(["study", str(tmp_path / "missing.csv"), "--out", str(out), "--stages", "impact"]) == 2
    summary = read_summary(out)
    assert summary["failed_stage"] == "load"
    assert "not found" in summary["error"]


def test_unknown_stage_is_a_config_error(tmp_path, tape_path):
    assert main(["study", str(tape_path), "--out", str(tmp_path / "o"), "--stages", "everything"]) == 1


def test_bad_config_file(tmp_path, tape_path):
    config = tmp_path / "config.json"
    config.write_text('{"lag_horizon": 0}')
    assert main(["fit", str(tape_path), "--out", str(tmp_path / "o"), "--config", str(config)]) == 1


def test_config_file_is_overridden_by_flags(tmp_path, tape_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"n_bins": 5, "min_bin_count": 10, "lag_horizon": 5000}))
    out = tmp_path / "fit"
    assert main(["fit", str(tape_path), "--out", str(out), "--config", str(config), "--lag-horizon", "100",
                 "--min-response-samples", "10"]) == 0
    recorded = read_summary(out)["config"]
    assert recorded["n_bins"] == 5
    assert recorded["lag_horizon"] == 100
    assert len((out / "response_market.csv").read_text().splitlines()) == 102


@pytest.mark.parametrize("argv", [[], ["study"], ["bogus", "x", "--out", "o"], ["fit", "x"]])
def test_usage_errors_exit_with_one(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1


def test_fit_command(tmp_path, tape_path):
    out = tmp_path / "fit"
    assert main(["fit", str(tape_path), "--out", str(out), "--lag-horizon", "100", "--min-response-samples",
                 "10"]) == 0
    summary = read_summary(out)
    assert summary["completed_stages"] == ["load", "impact", "lags", "volumes"]
    assert not (out / "summary.md").exists()
    assert not (out / "kernel.csv").exists()


def test_invert_command(tmp_path, tape_path):
    out = tmp_path / "invert"
    assert main(["invert", str(tape_path), "--out", str(out), "--lag-horizon", "100", "--L-max", "30",
                 "--horizon", "120", "--min-response-samples", "10"]) == 0
    kernel = (out / "kernel.csv").read_text().splitlines()
    assert kernel[0] == "lag,G0"
    assert len(kernel) == 31
    assert read_summary(out)["completed_stages"] == ["load", "lags", "kernel"]


def test_shuffle_command(tmp_path, tape_path):
    out = tmp_path / "shuffle"
    assert main(["shuffle", str(tape_path), "--out", str(out), "--seed", "4", "--activity-floor", "1000",
                 "--replicates", "10", "--n-bins", "10"]) == 0
    with open(out / "null_band.json") as handle:
        report = json.load(handle)
    assert report["seed"] == 4
    assert set(report["firms"]) == {"101", "202", "303"}
    assert all(len(entry["samples"]) == 10 for entry in report["firms"].values())
    assert report["overlap_stderr"] is False


def test_shuffle_with_the_overlap_rule(tmp_path, tape_path):
    out = tmp_path / "shuffle"
    assert main(["shuffle", str(tape_path), "--out", str(out), "--seed", "4", "--activity-floor", "1000",
                 "--replicates", "10", "--n-bins", "10", "--band-overlap-stderr"]) == 0
    with open(out / "null_band.json") as handle:
        assert json.load(handle)["overlap_stderr"] is True
    assert read_summary(out)["null_band"]["overlap_stderr"] is True


def test_shuffle_needs_a_seed(tmp_path, tape_path):
    assert main(["shuffle", str(tape_path), "--out", str(tmp_path / "o")]) == 1


def test_shipped_data_files_are_valid():
    data_dir = Path(__file__).resolve().parent.parent / "data"

    config = StudyConfig.load(data_dir / "study_config.json").validate()
    assert config.seed == 7
    assert config.correlation_fit_window == (10, 1000)
    manifest = SyntheticManifest.load(data_dir / "example_manifest.json").validate()
    assert manifest.stock_label == "TEF-SYN"
    assert manifest.firms[3].kernel is not None
