"""
measure.py

Description:
    Estimators over a Tape, at market level or restricted to the trades one firm
    triggered: the conditional impact curve Delta(V), the lag response R(l), the
    sign autocorrelation C(l), the scaled volume distribution, and the check that
    R(l, V) factorizes into Delta(V) times the response shape.

    All quantities are in bps of the spread (sigma = <s>/100). For lag l only
    ticks t <= N-1-l are admissible, in every scope, so the weighted identities
    R_M(l) = sum_i pi_i(l) R_i(l) and C_M(l) = sum_i pi_i(l) C_i(l) hold exactly
    with pi_i(l) counted over admissible ticks.

Dependencies:
    numpy, scipy, pandas
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import signal, stats

from errors import ConfigError, EmptyScopeError, ScopeError

logger = logging.getLogger(__name__)

MARKET = "MARKET"

DEFAULT_N_BINS = 25
DEFAULT_MIN_BIN_COUNT = 50
DEFAULT_LAG_HORIZON = 1000
DEFAULT_MIN_RESPONSE_SAMPLES = 100
DEFAULT_MIN_CELL_COUNT = 50
LAG_METHODS = ("direct", "fft")


@dataclass(frozen=True, eq=False)
class ImpactCurve:
    """Delta(V) per log-spaced volume bin; only bins with enough trades are reported."""
    scope: object
    bin_edges: np.ndarray
    bins: np.ndarray
    mean_volume: np.ndarray
    delta: np.ndarray
    count: np.ndarray
    stderr: np.ndarray
    suppressed: int = 0

    def __len__(self):
        return len(self.bins)

    @property
    def lower(self):
        return self.bin_edges[self.bins]

    @property
    def upper(self):
        return self.bin_edges[self.bins + 1]

    def to_frame(self):
        return pd.DataFrame({
            "bin": self.bins,
            "lower": self.lower,
            "upper": self.upper,
            "mean_volume": self.mean_volume,
            "value": self.delta,
            "count": self.count,
            "stderr": self.stderr,
        })


@dataclass(frozen=True, eq=False)
class LagSeries:
    """A series indexed by lag 0..L (response, correlation or kernel)."""
    values: np.ndarray
    count: np.ndarray | None = None
    stderr: np.ndarray | None = None
    label: str = "response"
    scope: object = MARKET
    min_samples: int = 0

    def __len__(self):
        return len(self.values)

    @property
    def L(self):
        return len(self.values) - 1

    @property
    def lags(self):
        return np.arange(len(self.values))

    @property
    def flagged(self):
        """Lags estimated from fewer than `min_samples` ticks."""
        if self.count is None:
            return np.zeros(len(self.values), dtype=bool)
        return (self.count < self.min_samples) | (self.count == 0)

    def truncated(self, L):
        if L > self.L:
            raise ConfigError(f"{self.label} series reaches lag {self.L}, lag {L} requested")
        cut = slice(0, L + 1)
        return LagSeries(
            values=self.values[cut],
            count=None if self.count is None else self.count[cut],
            stderr=None if self.stderr is None else self.stderr[cut],
            label=self.label,
            scope=self.scope,
            min_samples=self.min_samples,
        )

    def to_frame(self):
        n = len(self.values)
        return pd.DataFrame({
            "lag": self.lags,
            "value": self.values,
            "count": self.count if self.count is not None else np.full(n, -1),
            "stderr": self.stderr if self.stderr is not None else np.full(n, np.nan),
        })


@dataclass(frozen=True, eq=False)
class VolumeDistribution:
    scope: object
    mean_volume: float
    scaled_samples: np.ndarray
    bin_edges: np.ndarray
    density: np.ndarray

    def integral(self):
        return float(np.sum(self.density * np.diff(self.bin_edges)))

    def ks_distance(self, other):
        """Sup distance between the empirical CDFs of two scaled samples."""
        return float(stats.ks_2samp(self.scaled_samples, other.scaled_samples).statistic)

    def to_frame(self):
        return pd.DataFrame({
            "lower": self.bin_edges[:-1],
            "upper": self.bin_edges[1:],
            "density": self.density,
        })


@dataclass(frozen=True, eq=False)
class LagTable:
    """Market and per-firm lag series from one pass per lag.

    `pi[k, l]` is firm k's share of the admissible ticks at lag l; rows of
    `firm_values` are NaN where a firm has no admissible tick.
    """
    label: str
    firms: np.ndarray
    market: np.ndarray
    market_count: np.ndarray
    firm_values: np.ndarray
    firm_counts: np.ndarray
    firm_stderr: np.ndarray
    pi: np.ndarray
    min_samples: int = 0

    @property
    def L(self):
        return len(self.market) - 1

    def market_series(self):
        return LagSeries(self.market, self.market_count, None, self.label, MARKET, self.min_samples)

    def firm_series(self, firm):
        k = self._row(firm)
        return LagSeries(self.firm_values[k], self.firm_counts[k], self.firm_stderr[k],
                         self.label, firm, self.min_samples)

    def participation(self, firm):
        """pi_i over the whole tape (lag 0, where every tick is admissible)."""
        k = self._row(firm)
        return float(self.pi[k, 0])

    def firm_contribution(self, firm):
        """Firm series with its lag sums divided by the firm's full trade count.

        sum_i pi_i * contribution_i(l) is the market series at every lag, with
        pi_i the tape-wide participation; it differs from firm_series by
        n_i(l) / n_i(0).
        """
        k = self._row(firm)
        counts = self.firm_counts[k]
        values = np.nan_to_num(self.firm_values[k]) * (counts / counts[0])
        return LagSeries(values, counts, None, self.label, firm, self.min_samples)

    def decomposition_residual(self):
        """|market(l) - sum_i pi_i(l) firm_i(l)| per lag."""
        weighted = np.where(self.pi > 0, self.pi * np.nan_to_num(self.firm_values), 0.0)
        return np.abs(self.market - weighted.sum(axis=0))

    def _row(self, firm):
        hits = np.flatnonzero(self.firms == firm)
        if len(hits) == 0:
            raise ScopeError(f"firm {firm} is not on the tape")
        return int(hits[0])


@dataclass(frozen=True, eq=False)
class FactorizationCheck:
    """Ratio R(l,V) R(0) / (Delta(V) R(l)) per (lag, volume bin)."""
    lags: np.ndarray
    bin_edges: np.ndarray
    ratio: np.ndarray
    count: np.ndarray
    valid: np.ndarray
    summary: float

    def to_frame(self):
        rows = []
        for i, lag in enumerate(self.lags):
            for b in range(self.ratio.shape[1]):
                rows.append({
                    "lag": int(lag),
                    "lower": self.bin_edges[b],
                    "upper": self.bin_edges[b + 1],
                    "ratio": self.ratio[i, b],
                    "count": int(self.count[i, b]),
                    "valid": bool(self.valid[i, b]),
                })
        return pd.DataFrame(rows)


def scope_ticks(tape, scope=MARKET, activity_floor=0):
    """Tick indices of a scope; None stands for the whole tape."""
    if scope is MARKET or scope == MARKET:
        return None
    ticks = tape.firm_index.get(int(scope))
    if ticks is None:
        raise ScopeError(f"firm {scope} triggers no trade on {tape.stock_label}")
    if len(ticks) < activity_floor:
        raise ScopeError(
            f"firm {scope} triggers {len(ticks)} trades on {tape.stock_label}, "
            f"below the activity floor of {activity_floor}"
        )
    return ticks


def _scoped(array, ticks):
    return array if ticks is None else array[ticks]


def mean_impact(tape, scope=MARKET, activity_floor=0):
    """<Delta> in bps of the spread."""
    ticks = scope_ticks(tape, scope, activity_floor)
    return float(np.mean(_scoped(tape.signed_impact, ticks)))


def mean_volume(tape, scope=MARKET, activity_floor=0):
    ticks = scope_ticks(tape, scope, activity_floor)
    return float(np.mean(_scoped(tape.volume, ticks)))


def log_bin_edges(volumes, n_bins=DEFAULT_N_BINS):
    lo, hi = float(np.min(volumes)), float(np.max(volumes))
    if hi <= lo:
        return np.array([lo, np.nextafter(lo, np.inf)])
    return np.geomspace(lo, hi, n_bins + 1)


def _bin_index(volumes, edges):
    idx = np.searchsorted(edges, volumes, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def _binned_stats(idx, values, n_bins):
    count = np.bincount(idx, minlength=n_bins)
    total = np.bincount(idx, weights=values, minlength=n_bins)
    squares = np.bincount(idx, weights=values * values, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count
        var = (squares - count * mean * mean) / (count - 1)
        stderr = np.where(count > 1, np.sqrt(np.clip(var, 0.0, None) / count), 0.0)
    return count, mean, stderr


def impact_curve(tape, scope=MARKET, n_bins=DEFAULT_N_BINS, min_bin_count=DEFAULT_MIN_BIN_COUNT,
                 activity_floor=0, bin_edges=None):
    ticks = scope_ticks(tape, scope, activity_floor)
    volumes = _scoped(tape.volume, ticks)
    impacts = _scoped(tape.signed_impact, ticks)
    if len(volumes) == 0:
        raise EmptyScopeError(f"no trades in scope {scope}")

    edges = np.asarray(bin_edges, dtype=float) if bin_edges is not None else log_bin_edges(volumes, n_bins)
    nb = len(edges) - 1
    idx = _bin_index(volumes, edges)
    count, delta, stderr = _binned_stats(idx, impacts, nb)
    volume_sum = np.bincount(idx, weights=volumes, minlength=nb)

    keep = np.flatnonzero(count >= max(min_bin_count, 1))
    suppressed = int(np.count_nonzero(count) - len(keep))
    if len(keep) == 0:
        logger.warning("Impact curve for scope %s has no bin with at least %d trades", scope, min_bin_count)
    return ImpactCurve(
        scope=scope,
        bin_edges=edges,
        bins=keep,
        mean_volume=volume_sum[keep] / count[keep],
        delta=delta[keep],
        count=count[keep],
        stderr=stderr[keep],
        suppressed=suppressed,
    )


def _check_horizon(tape, L):
    if L < 0:
        raise ConfigError(f"lag horizon must be non-negative, got {L}")
    if L >= tape.n:
        raise ConfigError(f"lag horizon L={L} must be below the tape length N={tape.n}")


def _lag_values(tape, ticks, lag, label):
    """Per-tick samples at one lag over the admissible ticks of a scope."""
    m = tape.n - lag
    if ticks is None:
        t = slice(0, m)
        sign = tape.sign[t]
    else:
        t = ticks[: np.searchsorted(ticks, m)]
        sign = tape.sign[t]
    if label == "response":
        before = tape.quote_before[t]
        after = tape.quote_after[lag:][t] if ticks is None else tape.quote_after[t + lag]
        return sign * (after - before) / tape.sigma
    other = tape.sign[lag:][t] if ticks is None else tape.sign[t + lag]
    return (sign * other).astype(float)


def _direct_series(tape, ticks, L, label):
    values = np.empty(L + 1)
    count = np.zeros(L + 1, dtype=np.int64)
    stderr = np.zeros(L + 1)
    for lag in range(L + 1):
        samples = _lag_values(tape, ticks, lag, label)
        count[lag] = len(samples)
        if len(samples) == 0:
            values[lag] = np.nan
            continue
        values[lag] = samples.mean()
        if len(samples) > 1:
            stderr[lag] = samples.std(ddof=1) / np.sqrt(len(samples))
    return values, count, stderr


def lagged_sums(a, b, L):
    """sum_t a[t] b[t+l] for l = 0..L, by FFT."""
    n = len(a)
    full = signal.correlate(b, a, mode="full", method="fft")
    return full[n - 1 : n + L]


def _fft_series(tape, ticks, L, label):
    n = tape.n
    mask = np.zeros(n)
    if ticks is None:
        mask[:] = 1.0
    else:
        mask[ticks] = 1.0
    lags = np.arange(L + 1)
    count = np.cumsum(mask)[n - 1 - lags].astype(np.int64)
    weighted_sign = tape.sign * mask
    if label == "response":
        reference = float(tape.quote_before.mean())
        after = (tape.quote_after - reference) / tape.sigma
        before = (tape.quote_before - reference) / tape.sigma
        forward = lagged_sums(weighted_sign, after, L)
        own = np.cumsum(weighted_sign * before)[n - 1 - lags]
        total = forward - own
        # (a_{t+l} - b_t)^2 expanded so every term is a lagged or cumulative sum
        squares = (lagged_sums(mask, after * after, L) - 2.0 * lagged_sums(mask * before, after, L)
                   + np.cumsum(mask * before * before)[n - 1 - lags])
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = total / count
            var = np.clip((squares - count * mean**2) / (count - 1), 0.0, None)
            stderr = np.where(count > 1, np.sqrt(var / count), 0.0)
    else:
        total = lagged_sums(weighted_sign, tape.sign.astype(float), L)
        stderr = None
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(count > 0, total / count, np.nan)
    if label == "correlation":
        values[0] = 1.0 if count[0] > 0 else np.nan
        with np.errstate(invalid="ignore", divide="ignore"):
            stderr = np.where(count > 1, np.sqrt(np.clip(1.0 - values**2, 0.0, None) / (count - 1)), 0.0)
    return values, count, stderr


def _lag_series(tape, scope, L, label, min_response_samples, activity_floor, method):
    if method not in LAG_METHODS:
        raise ConfigError(f"lag method must be one of {LAG_METHODS}, got {method!r}")
    _check_horizon(tape, L)
    ticks = scope_ticks(tape, scope, activity_floor)
    if method == "fft":
        values, count, stderr = _fft_series(tape, ticks, L, label)
    else:
        values, count, stderr = _direct_series(tape, ticks, L, label)
    series = LagSeries(values, count, stderr, label, scope, min_response_samples)
    flagged = np.count_nonzero(series.flagged)
    if flagged:
        logger.warning(
            "%s for scope %s: %d of %d lags rest on fewer than %d samples",
            label, scope, flagged, L + 1, min_response_samples,
        )
    return series


def response(tape, scope=MARKET, L=DEFAULT_LAG_HORIZON, min_response_samples=DEFAULT_MIN_RESPONSE_SAMPLES,
             activity_floor=0, method="direct"):
    """R(l) = <(q+_{t+l} - q-_t) eps_t> / sigma over admissible t of the scope."""
    return _lag_series(tape, scope, L, "response", min_response_samples, activity_floor, method)


def sign_correlation(tape, scope=MARKET, L=DEFAULT_LAG_HORIZON, min_response_samples=DEFAULT_MIN_RESPONSE_SAMPLES,
                     activity_floor=0, method="direct", connected=False):
    """C(l) = <eps_t eps_{t+l}> with t in the scope and t+l any trade.

    `connected` subtracts <eps>_scope <eps>_tape at every lag.
    """
    series = _lag_series(tape, scope, L, "correlation", min_response_samples, activity_floor, method)
    if not connected:
        return series
    ticks = scope_ticks(tape, scope, activity_floor)
    offset = float(np.mean(_scoped(tape.sign, ticks))) * float(np.mean(tape.sign))
    return LagSeries(series.values - offset, series.count, series.stderr, series.label,
                     series.scope, series.min_samples)


def autocorrelation(signs, L, method="fft"):
    """C(l) of a bare sign sequence, l = 0..L."""
    signs = np.asarray(signs, dtype=float)
    n = len(signs)
    if L >= n:
        raise ConfigError(f"lag horizon L={L} must be below the sequence length {n}")
    if method == "fft":
        sums = lagged_sums(signs, signs, L)
    else:
        sums = np.array([np.dot(signs[: n - lag], signs[lag:]) for lag in range(L + 1)])
    values = sums / (n - np.arange(L + 1))
    values[0] = 1.0
    return values


def _lag_table(tape, L, label, min_response_samples):
    _check_horizon(tape, L)
    codes = tape.firm_codes
    n_firms = len(tape.firms)
    market = np.empty(L + 1)
    market_count = np.empty(L + 1, dtype=np.int64)
    values = np.full((n_firms, L + 1), np.nan)
    counts = np.zeros((n_firms, L + 1), dtype=np.int64)
    stderr = np.zeros((n_firms, L + 1))
    for lag in range(L + 1):
        samples = _lag_values(tape, None, lag, label)
        m = len(samples)
        market[lag] = samples.mean()
        market_count[lag] = m
        firm_codes = codes[:m]
        count = np.bincount(firm_codes, minlength=n_firms)
        total = np.bincount(firm_codes, weights=samples, minlength=n_firms)
        squares = np.bincount(firm_codes, weights=samples * samples, minlength=n_firms)
        seen = count > 0
        values[seen, lag] = total[seen] / count[seen]
        counts[:, lag] = count
        many = count > 1
        var = (squares[many] - count[many] * values[many, lag] ** 2) / (count[many] - 1)
        stderr[many, lag] = np.sqrt(np.clip(var, 0.0, None) / count[many])
    pi = counts / market_count
    logger.info("Computed %s table to lag %d for %d firms", label, L, n_firms)
    return LagTable(label, tape.firms, market, market_count, values, counts, stderr, pi, min_response_samples)


def response_by_firm(tape, L=DEFAULT_LAG_HORIZON, min_response_samples=DEFAULT_MIN_RESPONSE_SAMPLES):
    return _lag_table(tape, L, "response", min_response_samples)


def correlation_by_firm(tape, L=DEFAULT_LAG_HORIZON, min_response_samples=DEFAULT_MIN_RESPONSE_SAMPLES):
    return _lag_table(tape, L, "correlation", min_response_samples)


def volume_distribution(tape, scope=MARKET, n_bins=DEFAULT_N_BINS, activity_floor=0):
    """Density histogram of V / <V> on log-spaced bins."""
    ticks = scope_ticks(tape, scope, activity_floor)
    volumes = _scoped(tape.volume, ticks)
    if len(volumes) == 0:
        raise EmptyScopeError(f"no trades in scope {scope}")
    average = float(np.mean(volumes))
    scaled = volumes / average
    lo, hi = float(scaled.min()), float(scaled.max())
    if hi <= lo * (1 + 1e-12):
        edges = np.array([lo * (1 - 1e-6), hi * (1 + 1e-6)])
    else:
        edges = np.geomspace(lo, hi, n_bins + 1)
    density, edges = np.histogram(scaled, bins=edges, density=True)
    scaled.setflags(write=False)
    return VolumeDistribution(scope, average, scaled, edges, density)


def factorization_check(tape, lags, volume_bins=DEFAULT_N_BINS, min_cell_count=DEFAULT_MIN_CELL_COUNT):
    """Compare R(l, V) with Delta(V) R(l) / R(0) on a (lag, volume-bin) grid.

    `volume_bins` is a bin count or explicit edges. Cells below `min_cell_count`
    or with a non-positive ratio are flagged and left out of the summary, which
    is the largest |log ratio| over the remaining cells.
    """
    lags = np.asarray(sorted(int(lag) for lag in lags))
    if len(lags) == 0:
        raise ConfigError("factorization check needs at least one lag")
    _check_horizon(tape, int(lags.max()))
    if np.ndim(volume_bins) == 0:
        edges = log_bin_edges(tape.volume, int(volume_bins))
    else:
        edges = np.asarray(volume_bins, dtype=float)
    nb = len(edges) - 1
    idx = _bin_index(tape.volume, edges)

    impact_count, delta, _ = _binned_stats(idx, np.asarray(tape.signed_impact), nb)
    r0 = float(np.mean(tape.signed_impact))

    ratio = np.full((len(lags), nb), np.nan)
    count = np.zeros((len(lags), nb), dtype=np.int64)
    for i, lag in enumerate(lags):
        samples = _lag_values(tape, None, int(lag), "response")
        cell_count, cell_mean, _ = _binned_stats(idx[: len(samples)], samples, nb)
        count[i] = cell_count
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio[i] = cell_mean * r0 / (delta * samples.mean())

    valid = (count >= min_cell_count) & (impact_count >= min_cell_count) & np.isfinite(ratio) & (ratio > 0)
    flagged = int(np.count_nonzero(count) - np.count_nonzero(valid))
    if flagged:
        logger.warning("Factorization check: %d populated cells flagged and excluded", flagged)
    summary = float(np.max(np.abs(np.log(ratio[valid])))) if valid.any() else float("nan")
    return FactorizationCheck(lags, edges, ratio, count, valid, summary)
