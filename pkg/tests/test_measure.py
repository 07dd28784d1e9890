import numpy as np
import pytest

from scipy import stats

from errors import ConfigError, ScopeError
from measure import (
    MARKET,
    autocorrelation,
    correlation_by_firm,
    factorization_check,
    impact_curve,
    lagged_sums,
    mean_impact,
    mean_volume,
    response,
    response_by_firm,
    sign_correlation,
    volume_distribution,
)
from propagator import Kernel, reconstruct_response
from synth import FirmSpec, KernelSpec, SyntheticManifest, propagate_impacts, sample_scaled_volumes, simulate
from tape import Tape


def brute_lag_mean(tape, lag, kind, ticks=None):
    ticks = range(tape.n) if ticks is None else ticks
    values = []
    for t in ticks:
        if t > tape.n - 1 - lag:
            continue
        if kind == "response":
            values.append(tape.sign[t] * (tape.quote_after[t + lag] - tape.quote_before[t]) / tape.sigma)
        else:
            values.append(tape.sign[t] * tape.sign[t + lag])
    return np.mean(values)


@pytest.fixture
def tiny_tape():
    rng = np.random.default_rng(3)
    n = 60
    return Tape.from_arrays(
        "T", 0.002,
        rng.choice([1, 2, 3], size=n, p=[0.5, 0.3, 0.2]),
        rng.choice([-1, 1], size=n),
        rng.uniform(100.0, 1000.0, size=n),
        rng.normal(0.0, 0.001, size=n),
        rng.normal(0.0, 0.001, size=n),
    )


def test_response_matches_brute_force(tiny_tape):
    R = response(tiny_tape, L=6, min_response_samples=0)
    for lag in range(7):
        assert R.values[lag] == pytest.approx(brute_lag_mean(tiny_tape, lag, "response"), rel=1e-12)
    assert R.count[3] == tiny_tape.n - 3


def test_firm_response_matches_brute_force(tiny_tape):
    ticks = tiny_tape.firm_index[2]
    R = response(tiny_tape, 2, L=5, min_response_samples=0)
    for lag in range(6):
        assert R.values[lag] == pytest.approx(brute_lag_mean(tiny_tape, lag, "response", ticks), rel=1e-12)


def test_correlation_matches_brute_force(tiny_tape):
    C = sign_correlation(tiny_tape, 1, L=5, min_response_samples=0)
    assert C.values[0] == 1.0
    ticks = tiny_tape.firm_index[1]
    for lag in range(1, 6):
        assert C.values[lag] == pytest.approx(brute_lag_mean(tiny_tape, lag, "correlation", ticks), abs=1e-12)


def test_response_at_lag_one_on_five_hand_trades():
    tape = Tape.from_arrays("H5", 100.0, [1, 2, 1, 2, 1], [1, 1, -1, 1, -1],
                            [10.0] * 5, [0.0, 1.0, 2.0, 1.0, 3.0], [1.0, 2.0, 1.0, 3.0, 2.0])
    R = response(tape, L=1, min_response_samples=0)
    # (2 - 0) + (1 - 1) - (3 - 2) + (2 - 1) over the four (t, t + 1) pairs
    assert R.count[1] == 4
    assert R.values[1] == pytest.approx(0.5)
    assert R.values[0] == pytest.approx(mean_impact(tape))


@pytest.mark.parametrize("method", ["direct", "fft"])
def test_alternating_signs_correlate_as_minus_one_to_the_lag(method):
    n = 50
    sign = np.where(np.arange(n) % 2 == 0, 1, -1)
    tape = Tape.from_arrays("ALT", 0.001, np.arange(n) % 3 + 1, sign, np.ones(n), np.zeros(n), np.zeros(n))
    C = sign_correlation(tape, L=10, min_response_samples=0, method=method)
    np.testing.assert_allclose(C.values, (-1.0) ** np.arange(11), atol=1e-12)


def test_fft_path_agrees_with_direct(small_tape):
    for scope in (MARKET, 202):
        direct = response(small_tape, scope, L=50, method="direct")
        fast = response(small_tape, scope, L=50, method="fft")
        np.testing.assert_allclose(fast.values, direct.values, rtol=1e-6, atol=1e-6)
        np.testing.assert_array_equal(fast.count, direct.count)
        np.testing.assert_allclose(fast.stderr, direct.stderr, rtol=1e-4, atol=1e-9)
        assert np.all(np.isfinite(fast.stderr))
        c_direct = sign_correlation(small_tape, scope, L=50, method="direct")
        c_fast = sign_correlation(small_tape, scope, L=50, method="fft")
        np.testing.assert_allclose(c_fast.values, c_direct.values, atol=1e-9)
        np.testing.assert_allclose(c_fast.stderr, c_direct.stderr, rtol=1e-6, atol=1e-9)


def test_decomposition_identities(small_tape):
    L = 40
    R = response_by_firm(small_tape, L)
    C = correlation_by_firm(small_tape, L)
    assert np.max(R.decomposition_residual() / np.abs(R.market).max()) < 1e-10
    assert np.max(C.decomposition_residual()) < 1e-10
    np.testing.assert_allclose(R.pi.sum(axis=0), 1.0, rtol=1e-12)
    np.testing.assert_allclose(R.market, response(small_tape, L=L).values, rtol=1e-10)


def test_firm_contributions_sum_to_the_market_with_global_weights(small_tape):
    L = 400
    C = correlation_by_firm(small_tape, L)
    total = sum(C.participation(firm) * C.firm_contribution(firm).values for firm in C.firms)
    np.testing.assert_allclose(total, C.market, rtol=0, atol=1e-12)
    assert C.participation(101) == pytest.approx(small_tape.participation()[101])
    # the two normalizations differ only by n_i(l) / n_i(0)
    counts = C.firm_series(202).count
    np.testing.assert_allclose(C.firm_contribution(202).values, C.firm_series(202).values * counts / counts[0],
                               rtol=1e-12)


def test_lag_table_firm_series_matches_scoped_response(small_tape):
    table = response_by_firm(small_tape, 20)
    direct = response(small_tape, 101, L=20)
    np.testing.assert_allclose(table.firm_series(101).values, direct.values, rtol=1e-10)
    np.testing.assert_array_equal(table.firm_series(101).count, direct.count)
    with pytest.raises(ScopeError):
        table.firm_series(999)


def test_scope_errors(small_tape):
    with pytest.raises(ScopeError, match="triggers no trade"):
        response(small_tape, 999, L=5)
    with pytest.raises(ScopeError, match="activity floor"):
        impact_curve(small_tape, 303, activity_floor=10**6)


def test_horizon_must_be_below_tape_length(tiny_tape):
    with pytest.raises(ConfigError):
        response(tiny_tape, L=tiny_tape.n)
    with pytest.raises(ConfigError):
        sign_correlation(tiny_tape, L=tiny_tape.n + 5)
    with pytest.raises(ConfigError):
        response(tiny_tape, L=3, method="slow")


def test_flagged_lags(tiny_tape):
    R = response(tiny_tape, L=5, min_response_samples=57)
    assert list(R.flagged) == [False, False, False, False, True, True]


def test_connected_correlation_removes_the_mean():
    n = 200
    tape = Tape.from_arrays("U", 0.001, np.ones(n), np.ones(n), np.ones(n), np.zeros(n), np.zeros(n))
    plain = sign_correlation(tape, L=5, min_response_samples=0)
    connected = sign_correlation(tape, L=5, min_response_samples=0, connected=True)
    np.testing.assert_allclose(plain.values, 1.0)
    np.testing.assert_allclose(connected.values, 0.0)


def test_impact_curve_bins_and_suppression(small_tape):
    curve = impact_curve(small_tape, n_bins=25, min_bin_count=50)
    assert np.all(curve.count >= 50)
    assert curve.count.sum() + curve.suppressed > 0
    assert np.all(np.diff(curve.mean_volume) > 0)
    assert np.all(curve.lower <= curve.mean_volume)
    assert np.all(curve.mean_volume <= curve.upper)
    frame = curve.to_frame()
    assert list(frame.columns) == ["bin", "lower", "upper", "mean_volume", "value", "count", "stderr"]


def test_impact_curve_of_six_hand_trades_in_one_bin():
    sign = [1, -1, 1, 1, -1, -1]
    after = [0.5, -1.5, 2.0, -1.0, -3.0, 0.0]
    volume = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0]
    tape = Tape.from_arrays("H6", 100.0, [1] * 6, sign, volume, np.zeros(6), after)
    curve = impact_curve(tape, n_bins=1, min_bin_count=1)
    # 0.5 + 1.5 + 2.0 - 1.0 + 3.0 + 0.0
    assert list(curve.count) == [6]
    assert curve.delta[0] == pytest.approx(1.0)
    assert curve.mean_volume[0] == pytest.approx(35.0)


def test_constant_impact_gives_a_flat_curve():
    rng = np.random.default_rng(4)
    n = 5000
    sign = rng.choice([-1, 1], size=n)
    k, sigma = 3.0, 0.002 / 100
    tape = Tape.from_arrays("FLAT", 0.002, np.ones(n), sign, rng.lognormal(8.0, 1.5, size=n), np.zeros(n),
                            sign * sigma * k)
    curve = impact_curve(tape, n_bins=10, min_bin_count=20)
    assert len(curve) >= 5
    np.testing.assert_allclose(curve.delta, k, rtol=1e-9)
    np.testing.assert_allclose(curve.stderr, 0.0, atol=1e-6)


def test_impact_curve_counts_cover_the_scope(small_tape):
    curve = impact_curve(small_tape, 202, min_bin_count=1)
    assert curve.count.sum() == small_tape.trade_counts()[202]
    assert curve.suppressed == 0


def test_mean_impact_and_volume(tiny_tape):
    expected = np.mean(tiny_tape.sign * (tiny_tape.quote_after - tiny_tape.quote_before)) / tiny_tape.sigma
    assert mean_impact(tiny_tape) == pytest.approx(expected)
    assert mean_volume(tiny_tape, 3) == pytest.approx(np.mean(tiny_tape.volume[tiny_tape.trigger_id == 3]))


def test_volume_distribution_is_a_density(small_tape):
    dist = volume_distribution(small_tape)
    assert dist.integral() == pytest.approx(1.0)
    assert np.mean(dist.scaled_samples) == pytest.approx(1.0)
    assert dist.ks_distance(dist) == 0.0


def test_scaled_volume_histograms_of_two_firms_collapse():
    n = 5000
    x = sample_scaled_volumes(2.95, 2 * n, np.random.default_rng(12))
    volume = np.concatenate([1000.0 * x[:n], 100.0 * x[n:]])
    tape = Tape.from_arrays("TWO", 0.001, [1] * n + [2] * n, np.ones(2 * n), volume, np.zeros(2 * n), np.zeros(2 * n))
    big, small = volume_distribution(tape, 1), volume_distribution(tape, 2)
    assert big.mean_volume / small.mean_volume == pytest.approx(10.0, rel=0.2)
    assert big.ks_distance(small) < 0.05
    assert stats.ks_2samp(volume[:n], volume[n:]).statistic > 0.5


def test_volume_distribution_unknown_firm(small_tape):
    with pytest.raises(ScopeError):
        volume_distribution(small_tape, 12345)


def test_autocorrelation_direct_and_fft_agree():
    signs = np.random.default_rng(0).choice([-1, 1], size=5000)
    np.testing.assert_allclose(autocorrelation(signs, 30, "fft"), autocorrelation(signs, 30, "direct"), atol=1e-9)
    assert abs(autocorrelation(signs, 30)[1:]).max() < 0.1


def test_lagged_sums():
    a = np.array([1.0, 2.0, 3.0])
    b = np.array([4.0, 5.0, 6.0])
    np.testing.assert_allclose(lagged_sums(a, b, 2), [32.0, 17.0, 6.0])


def test_factorization_in_a_separable_world():
    manifest = SyntheticManifest(
        n_trades=400_000, seed=5,
        firms=(FirmSpec(firm_id=1, weight=1.0, alpha=0.5),),
    )
    tape = simulate(manifest)
    edges = np.quantile(tape.volume, [0.0, 0.25, 0.5, 0.75, 1.0])
    edges[-1] = np.nextafter(edges[-1], np.inf)
    check = factorization_check(tape, [1, 5], volume_bins=edges, min_cell_count=50)
    assert check.valid.all()
    np.testing.assert_allclose(check.ratio, 1.0, atol=0.15)
    assert check.summary < 0.15
    assert len(check.to_frame()) == 8


def test_factorization_on_eight_hand_trades():
    volume = [10.0, 100.0] * 4
    after = [1.0, 2.0] * 4
    tape = Tape.from_arrays("H8", 100.0, [1, 2] * 4, np.ones(8), volume, np.zeros(8), after)
    check = factorization_check(tape, [1, 2], volume_bins=[5.0, 50.0, 500.0], min_cell_count=1)
    # Delta = (1, 2), R(0) = 3/2; lag 1: R = 11/7, cells (2, 1); lag 2: R = 3/2, cells (1, 2)
    np.testing.assert_allclose(check.ratio, [[21 / 11, 21 / 44], [1.0, 1.0]], rtol=1e-12)
    np.testing.assert_array_equal(check.count, [[4, 3], [3, 3]])
    assert check.valid.all()
    assert check.summary == pytest.approx(np.log(44 / 21))


def _two_class_tape(betas, n=200_000, seed=9):
    """Small and large trades, each class propagated through its own kernel."""
    rng = np.random.default_rng(seed)
    large = rng.random(n) < 0.5
    volume = np.where(large, 1000.0, 100.0)
    sign = rng.choice([-1, 1], size=n)
    kernels = [KernelSpec(1.0, 1.0, beta) for beta in betas]
    before, after = propagate_impacts(sign * volume**0.3, large.astype(np.int64), kernels)
    return Tape.from_arrays("CLS", 100.0, np.ones(n), sign, volume, before, after)


def test_volume_dependent_kernel_breaks_the_factorization():
    edges = [50.0, 500.0, 5000.0]
    separable = factorization_check(_two_class_tape([0.5, 0.5]), [2, 8], volume_bins=edges)
    mixed = factorization_check(_two_class_tape([0.2, 1.5]), [2, 8], volume_bins=edges)
    assert separable.valid.all()
    assert separable.summary < 0.2
    assert mixed.summary > separable.summary + 0.4


def test_measured_response_follows_the_forward_model():
    spec = KernelSpec(3.5, 21.3, 0.375)
    manifest = SyntheticManifest(
        n_trades=300_000, seed=17, kernel=spec,
        firms=(FirmSpec(firm_id=1, weight=1.0, alpha=0.0, c=1.0, metaorder_tail=1.5),),
    )
    tape = simulate(manifest)
    L, H = 50, 2000
    R = response(tape, L=L, min_response_samples=0)
    C = sign_correlation(tape, L=H, min_response_samples=0, method="fft")
    model = reconstruct_response(Kernel.from_form(spec.gamma0, spec.l0, spec.beta, L_max=H), C,
                                 float(R.values[0]), L=L, H=H, coincident=True)
    assert R.values[0] == pytest.approx(1.0)
    np.testing.assert_allclose(R.values[1:], model.values[1:], rtol=0.05)
