from collections import Counter

import numpy as np
import pytest

from errors import ConfigError, EmptyScopeError
from nullmodel import impact_exponent_estimator, null_band, shuffle_ids
from synth import FirmSpec, SyntheticManifest, simulate
from tape import Tape


def four_trade_tape():
    return Tape.from_arrays("F", 0.001, [1, 1, 2, 2], [1, -1, 1, -1], [10.0, 20.0, 30.0, 40.0],
                            np.zeros(4), np.zeros(4))


@pytest.fixture
def estimator():
    return impact_exponent_estimator(n_bins=10, min_bin_count=20)


def test_single_firm_is_unchanged():
    tape = Tape.from_arrays("S", 0.001, [7] * 5, [1, 1, -1, 1, -1], np.arange(1.0, 6.0), np.zeros(5), np.zeros(5))
    np.testing.assert_array_equal(shuffle_ids(tape, 3).trigger_id, tape.trigger_id)


def test_shuffle_keeps_counts_and_everything_else(small_tape):
    shuffled = shuffle_ids(small_tape, 99)
    assert shuffled.trade_counts() == small_tape.trade_counts()
    assert not np.array_equal(shuffled.trigger_id, small_tape.trigger_id)
    for name in ("sign", "volume", "quote_before", "quote_after"):
        np.testing.assert_array_equal(getattr(shuffled, name), getattr(small_tape, name))


def test_shuffle_reaches_every_assignment():
    tape = four_trade_tape()
    seen = Counter(tuple(shuffle_ids(tape, seed).trigger_id) for seed in range(600))
    assert len(seen) == 6
    assert all(60 <= count <= 140 for count in seen.values())


def test_shuffle_needs_a_seed():
    with pytest.raises(ConfigError):
        shuffle_ids(four_trade_tape(), None)


def test_null_band_is_reproducible_and_worker_independent(small_tape, estimator):
    kwargs = dict(n_replicates=4, seed=7, estimator=estimator, firms=[101, 202, 303])
    first = null_band(small_tape, workers=1, **kwargs)
    second = null_band(small_tape, workers=3, **kwargs)
    assert first.to_dict() == second.to_dict()
    assert set(first.firms) == {101, 202, 303}
    assert all(len(first.samples[firm]) + sum(1 for _, f, _ in first.failures if f == firm) == 4
               for firm in first.firms)


def test_null_band_report_fields(small_tape, estimator):
    report = null_band(small_tape, 3, seed=1, estimator=estimator, firms=[101, 202], market_alpha=0.3)
    data = report.to_dict()
    assert data["seed"] == 1
    assert data["rng"] == "PCG64"
    assert data["market_alpha"] == 0.3
    assert set(data["firms"]) == {"101", "202"}
    assert 0.0 <= data["exceedance_fraction"] <= 1.0
    mean, std = report.band[101]
    alpha, stderr = report.real[101]
    assert data["overlap_stderr"] is False
    assert report.outside[101] == (abs(alpha - mean) > std)


def test_overlap_rule_widens_the_band_by_the_real_stderr(small_tape, estimator):
    kwargs = dict(n_replicates=3, seed=1, estimator=estimator, firms=[101, 202, 303], band_sigma=0.5)
    plain = null_band(small_tape, **kwargs)
    overlap = null_band(small_tape, overlap_stderr=True, **kwargs)
    assert overlap.to_dict()["overlap_stderr"] is True
    for firm in plain.firms:
        mean, std = overlap.band[firm]
        alpha, stderr = overlap.real[firm]
        assert overlap.outside[firm] == (abs(alpha - mean) > stderr + 0.5 * std)
        # the wider test never flags a firm the plain band keeps
        assert not overlap.outside[firm] or plain.outside[firm]
    assert overlap.exceedance_fraction <= plain.exceedance_fraction


def test_null_band_warns_on_few_replicates(small_tape, estimator, caplog):
    with caplog.at_level("WARNING"):
        null_band(small_tape, 2, seed=1, estimator=estimator, firms=[101])
    assert "unreliable" in caplog.text


def test_null_band_argument_checks(small_tape, estimator):
    with pytest.raises(ConfigError, match="seed"):
        null_band(small_tape, 20, seed=None, estimator=estimator)
    with pytest.raises(ConfigError):
        null_band(small_tape, 0, seed=1, estimator=estimator)
    with pytest.raises(EmptyScopeError):
        null_band(small_tape, 20, seed=1, estimator=estimator, activity_floor=10**6)


def _twenty_firm_world(alphas, seed):
    firms = tuple(FirmSpec(firm_id=i + 1, weight=1 / 20, alpha=float(a)) for i, a in enumerate(alphas))
    return simulate(SyntheticManifest(n_trades=100_000, seed=seed, firms=firms, impact_noise=0.3))


@pytest.mark.slow
def test_homogeneous_firms_stay_inside_the_band():
    tape = _twenty_firm_world(np.full(20, 0.25), seed=31)
    report = null_band(tape, 40, seed=5, estimator=impact_exponent_estimator(n_bins=10), activity_floor=1000,
                       band_sigma=2.5)
    assert len(report.firms) == 20
    assert report.exceedance_fraction <= 0.1


@pytest.mark.slow
def test_heterogeneous_firms_leave_the_band():
    tape = _twenty_firm_world(np.linspace(-0.6, 0.6, 20), seed=32)
    report = null_band(tape, 20, seed=5, estimator=impact_exponent_estimator(n_bins=10), activity_floor=1000)
    assert report.exceedance_fraction >= 0.6


@pytest.mark.slow
def test_band_width_settles_with_the_replicate_count():
    firms = tuple(FirmSpec(firm_id=i + 1, weight=0.1, alpha=0.25) for i in range(10))
    tape = simulate(SyntheticManifest(n_trades=60_000, seed=33, firms=firms, impact_noise=0.3))
    estimator = impact_exponent_estimator(n_bins=10)
    few = null_band(tape, 10, seed=8, estimator=estimator, activity_floor=1000)
    many = null_band(tape, 100, seed=8, estimator=estimator, activity_floor=1000)
    assert few.pooled[1] == pytest.approx(many.pooled[1], rel=0.2)
