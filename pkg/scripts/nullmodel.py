"""
nullmodel.py

Description:
    Firm-identity shuffling null model. The trigger ids of a tape are permuted
    over its trades, which keeps every firm's trade count (and so every
    participation ratio) exactly while destroying any link between a firm and
    the trades it made. Re-estimating each firm's impact exponent on many
    shuffled tapes gives the band of exponents sampling noise alone produces;
    real exponents outside that band point to genuine heterogeneity.

    A real exponent counts as outside its band when it falls outside
    mean' +/- k sd', k = band_sigma. With overlap_stderr the real exponent's own
    standard error widens the test: outside only when [alpha_i +/- se_i] and
    [mean' +/- k sd'] do not overlap.

Dependencies:
    numpy
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, EmptyScopeError, StudyError
from fit import fit_power_law
from measure import DEFAULT_MIN_BIN_COUNT, DEFAULT_N_BINS, impact_curve
from tape import DEFAULT_ACTIVITY_FLOOR

logger = logging.getLogger(__name__)

RNG_NAME = "PCG64"
MIN_USABLE_REPLICATES = 10


def _generator(seed):
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if seed is None:
        raise ConfigError("shuffling needs an explicit seed")
    return np.random.Generator(np.random.PCG64(seed))


def shuffle_ids(tape, seed):
    """Tape with trigger ids permuted uniformly over the trades; all else unchanged."""
    return tape.with_trigger_ids(_generator(seed).permutation(tape.trigger_id))


def impact_exponent_estimator(n_bins=DEFAULT_N_BINS, min_bin_count=DEFAULT_MIN_BIN_COUNT, window=None):
    """Estimator (tape, firm) -> PowerLawFit of the firm's impact curve."""
    def estimate(tape, firm):
        return fit_power_law(impact_curve(tape, firm, n_bins=n_bins, min_bin_count=min_bin_count), window=window)
    return estimate


@dataclass
class ShuffleReport:
    seed: int
    n_replicates: int
    band_sigma: float
    firms: list
    samples: dict
    band: dict
    pooled: tuple
    real: dict
    outside: dict
    exceedance_fraction: float
    failures: list = field(default_factory=list)
    market_alpha: float | None = None
    overlap_stderr: bool = False
    rng: str = RNG_NAME

    def to_dict(self):
        return {
            "seed": self.seed,
            "rng": self.rng,
            "n_replicates": self.n_replicates,
            "band_sigma": self.band_sigma,
            "overlap_stderr": self.overlap_stderr,
            "market_alpha": self.market_alpha,
            "pooled": {"mean": self.pooled[0], "std": self.pooled[1]},
            "exceedance_fraction": self.exceedance_fraction,
            "firms": {
                str(firm): {
                    "alpha": self.real[firm][0],
                    "stderr": self.real[firm][1],
                    "band_mean": self.band[firm][0],
                    "band_std": self.band[firm][1],
                    "outside": self.outside[firm],
                    "samples": [float(v) for v in self.samples[firm]],
                }
                for firm in self.firms
            },
            "failures": [{"replicate": r, "firm": f, "error": msg} for r, f, msg in self.failures],
        }


def _replicate(tape, firms, estimator, index, seed_seq):
    shuffled = shuffle_ids(tape, seed_seq)
    values, failures = {}, []
    for firm in firms:
        try:
            values[firm] = estimator(shuffled, firm).exponent
        except StudyError as e:
            failures.append((index, int(firm), str(e)))
    return values, failures


def null_band(tape, n_replicates, seed, estimator=None, firms=None, activity_floor=DEFAULT_ACTIVITY_FLOOR,
              band_sigma=1.0, workers=1, market_alpha=None, overlap_stderr=False):
    """Shuffle firm ids n_replicates times and build each firm's band of exponents.

    Replicate r uses the r-th child of SeedSequence(seed); results are gathered
    by replicate index, so the report does not depend on `workers`.
    """
    if n_replicates < 1:
        raise ConfigError(f"n_replicates must be at least 1, got {n_replicates}")
    if seed is None:
        raise ConfigError("the null band needs an explicit seed")
    if n_replicates < MIN_USABLE_REPLICATES:
        logger.warning("Only %d replicates; the band is unreliable below %d", n_replicates, MIN_USABLE_REPLICATES)
    estimator = estimator or impact_exponent_estimator()
    firms = list(tape.firms_above(activity_floor) if firms is None else firms)
    if not firms:
        raise EmptyScopeError(f"no firm on {tape.stock_label} reaches the activity floor of {activity_floor}")

    real = {}
    for firm in firms:
        try:
            fit = estimator(tape, firm)
            real[firm] = (fit.exponent, fit.stderr_exponent)
        except StudyError as e:
            logger.warning("Firm %s left out of the null test: %s", firm, e)
    tested = [firm for firm in firms if firm in real]
    if not tested:
        raise EmptyScopeError("no firm exponent could be estimated on the real tape")

    children = np.random.SeedSequence(seed).spawn(n_replicates)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda r: _replicate(tape, tested, estimator, r, children[r]),
                                    range(n_replicates)))
    else:
        results = [_replicate(tape, tested, estimator, r, children[r]) for r in range(n_replicates)]

    samples = {firm: [] for firm in tested}
    failures = []
    for values, failed in results:
        for firm, value in values.items():
            samples[firm].append(value)
        failures.extend(failed)
    if failures:
        logger.warning("%d estimator failures across %d replicates", len(failures), n_replicates)

    band, outside = {}, {}
    for firm in tested:
        values = np.asarray(samples[firm], dtype=float)
        samples[firm] = values
        if len(values) == 0:
            band[firm] = (float("nan"), float("nan"))
            outside[firm] = False
            continue
        mean = float(values.mean())
        std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        band[firm] = (mean, std)
        alpha, stderr = real[firm]
        half_width = band_sigma * std + (stderr if overlap_stderr else 0.0)
        outside[firm] = bool(abs(alpha - mean) > half_width)

    pooled_values = np.concatenate([samples[firm] for firm in tested])
    pooled = (
        float(pooled_values.mean()) if len(pooled_values) else float("nan"),
        float(pooled_values.std(ddof=1)) if len(pooled_values) > 1 else float("nan"),
    )
    judged = [firm for firm in tested if len(samples[firm])]
    fraction = sum(outside[firm] for firm in judged) / len(judged) if judged else float("nan")
    logger.info("Null band: %d of %d firms outside (seed %s, %d replicates)",
                sum(outside.values()), len(judged), seed, n_replicates)
    return ShuffleReport(
        seed=seed, n_replicates=n_replicates, band_sigma=band_sigma, firms=tested, samples=samples,
        band=band, pooled=pooled, real=real, outside=outside, exceedance_fraction=fraction,
        failures=failures, market_alpha=market_alpha, overlap_stderr=overlap_stderr,
    )
