"""
fit.py

Description:
    Parameter estimation and closed-form results used by the impact study:

    - count-weighted log-log power-law fits of impact curves and lag series
    - the scaled volume law P(x) = a / (b + x)^gamma (normalized, mean one) and
      its maximum-likelihood fit
    - the Gamma-function factor linking Delta_i(V) = c_i V^alpha_i and the volume
      law to the average impact <Delta_i>
    - the large-volume constraint ln c_i + alpha_i ln V0 = ln Delta0
    - cross-firm statistics (participation-weighted mean exponent, correlation
      with the market exponent, pooled slope of <Delta_i> against <V_i>)

Dependencies:
    numpy, scipy
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, special, stats

from errors import DegenerateStatisticError, DomainError, FitError
from measure import ImpactCurve, LagSeries

logger = logging.getLogger(__name__)

MIN_FIT_POINTS = 4
MAX_NEGATIVE_FRACTION = 0.5
DEFAULT_CORRELATION_WINDOW = (10, 1000)
DEFAULT_V0 = 60_000.0
DEFAULT_DELTA0 = 40.0
GAMMA_UPPER_BOUND = 200.0


@dataclass(frozen=True)
class PowerLawFit:
    coefficient: float
    exponent: float
    stderr_exponent: float
    fit_window: tuple
    r_squared: float
    n_points: int
    excluded: int = 0
    stderr_coefficient: float = 0.0
    scale: float | None = None
    stderr_scale: float | None = None

    def __post_init__(self):
        lo, hi = self.fit_window
        if not lo < hi:
            raise ValueError(f"fit window must satisfy lo < hi, got {self.fit_window}")
        if self.stderr_exponent < 0:
            raise ValueError("stderr_exponent must be non-negative")

    def predict(self, x):
        return self.coefficient * np.asarray(x, dtype=float) ** self.exponent

    def to_dict(self):
        out = asdict(self)
        out["fit_window"] = list(self.fit_window)
        return out


@dataclass(frozen=True)
class VolumeLawFit:
    a: float
    b: float
    gamma: float
    stderr_gamma: float
    n_samples: int
    log_likelihood: float
    constrained: bool = True

    def to_dict(self):
        return asdict(self)


@dataclass
class FirmSummary:
    firm: int
    stock_label: str
    pi: float
    n_trades: int
    mean_volume: float
    mean_impact: float
    alpha: float | None = None
    c: float | None = None
    stderr_alpha: float | None = None
    predicted_impact: float | None = None
    kappa: float | None = None
    chi: float | None = None

    def __post_init__(self):
        if not 0 < self.pi <= 1:
            raise ValueError(f"participation ratio must lie in (0, 1], got {self.pi}")
        if not self.mean_volume > 0:
            raise ValueError(f"mean volume must be positive, got {self.mean_volume}")

    @property
    def fitted(self):
        return self.alpha is not None and self.c is not None

    def to_dict(self):
        return asdict(self)


@dataclass
class ConstraintResiduals:
    V0: float
    Delta0: float
    residuals: dict
    rms: float


@dataclass
class ConstraintEstimate:
    V0: float
    Delta0: float
    stderr_log_V0: float
    stderr_log_Delta0: float
    r_value: float
    n_firms: int


@dataclass
class CrossFirmStatistics:
    alpha_bar: dict
    covered_fraction: dict
    market_alpha: dict
    pearson: float | None = None
    pearson_note: str | None = None
    slope: float | None = None
    stderr_slope: float | None = None
    slope_note: str | None = None
    n_slope_points: int = 0
    notes: list = field(default_factory=list)


def _xy(curve):
    if isinstance(curve, ImpactCurve):
        return curve.mean_volume, curve.delta, curve.count
    if isinstance(curve, LagSeries):
        keep = curve.lags >= 1
        if curve.count is not None:
            keep &= ~curve.flagged
        weights = curve.count[keep] if curve.count is not None else np.ones(np.count_nonzero(keep))
        return curve.lags[keep].astype(float), curve.values[keep], weights
    raise TypeError(f"cannot fit a power law to {type(curve).__name__}")


def _fit_points(curve, window):
    if isinstance(curve, tuple):
        x, y, w = (np.asarray(v, dtype=float) for v in curve)
    else:
        x, y, w = (np.asarray(v, dtype=float) for v in _xy(curve))
    finite = np.isfinite(x) & np.isfinite(y) & (x > 0) & (w > 0)
    if window is not None:
        lo, hi = window
        finite &= (x >= lo) & (x <= hi)
    return x, y, w, finite, finite & (y > 0)


def usable_points(curve, window=None):
    """Number of points fit_power_law would keep for `curve` in `window`."""
    return int(np.count_nonzero(_fit_points(curve, window)[4]))


def fit_power_law(curve, window=None, min_points=MIN_FIT_POINTS):
    """Fit y = c x^alpha by count-weighted least squares on (log x, log y).

    `curve` is an ImpactCurve, a LagSeries (lag 0 and flagged lags are skipped)
    or an (x, y, weights) triple. Points with y <= 0 are excluded and counted.
    """
    x, y, w, finite, usable = _fit_points(curve, window)
    candidates = np.count_nonzero(finite)
    n = int(np.count_nonzero(usable))
    excluded = candidates - n

    if candidates and excluded / candidates > MAX_NEGATIVE_FRACTION:
        raise FitError(
            f"{excluded} of {candidates} points in the window have non-positive ordinate; "
            f"refusing a log-log fit"
        )
    if n < min_points:
        raise FitError(f"power-law fit needs at least {min_points} usable points, found {n}")
    if excluded:
        logger.info("Excluded %d non-positive points from the power-law fit", excluded)

    lx, ly, w = np.log(x[usable]), np.log(y[usable]), w[usable]
    root_w = np.sqrt(w)
    design = np.column_stack([np.ones(n), lx]) * root_w[:, None]
    (intercept, slope), *_ = np.linalg.lstsq(design, ly * root_w, rcond=None)

    residuals = ly - intercept - slope * lx
    ss_res = float(np.sum(w * residuals**2))
    mean_ly = np.sum(w * ly) / np.sum(w)
    ss_tot = float(np.sum(w * (ly - mean_ly) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    scale = ss_res / (n - 2) if n > 2 else 0.0
    covariance = scale * np.linalg.inv(design.T @ design)
    se_intercept, se_slope = np.sqrt(np.clip(np.diag(covariance), 0.0, None))

    coefficient = float(math.exp(intercept))
    fit_window = tuple(window) if window is not None else (float(x[usable].min()), float(x[usable].max()))
    if not fit_window[0] < fit_window[1]:
        raise FitError(f"degenerate fit window {fit_window}")
    return PowerLawFit(
        coefficient=coefficient,
        exponent=float(slope),
        stderr_exponent=float(se_slope),
        fit_window=fit_window,
        r_squared=float(r_squared),
        n_points=n,
        excluded=int(excluded),
        stderr_coefficient=float(coefficient * se_intercept),
    )


def fit_correlation_exponent(series, window=DEFAULT_CORRELATION_WINDOW):
    """gamma of C(l) ~ l^-gamma; the returned exponent is gamma itself (positive for decay)."""
    raw = fit_power_law(series, window=window)
    return PowerLawFit(
        coefficient=raw.coefficient,
        exponent=-raw.exponent,
        stderr_exponent=raw.stderr_exponent,
        fit_window=raw.fit_window,
        r_squared=raw.r_squared,
        n_points=raw.n_points,
        excluded=raw.excluded,
        stderr_coefficient=raw.stderr_coefficient,
    )


def volume_law_constants(gamma):
    """(a, b) of the mean-one, unit-mass law: b = gamma - 2, a = (gamma - 1) b^(gamma - 1)."""
    if not gamma > 2:
        raise DomainError(f"the volume law needs gamma > 2 for a finite mean, got {gamma}")
    b = gamma - 2.0
    return (gamma - 1.0) * b ** (gamma - 1.0), b


def volume_law_pdf(x, gamma):
    a, b = volume_law_constants(gamma)
    return a / (b + np.asarray(x, dtype=float)) ** gamma


def volume_law_cdf(x, gamma):
    _, b = volume_law_constants(gamma)
    return 1.0 - (b / (b + np.asarray(x, dtype=float))) ** (gamma - 1.0)


def volume_law_ppf(u, gamma):
    """Inverse CDF in the survival form x = b (u^(-1/(gamma-1)) - 1), u uniform on (0, 1]."""
    _, b = volume_law_constants(gamma)
    return b * (np.asarray(u, dtype=float) ** (-1.0 / (gamma - 1.0)) - 1.0)


def _constrained_nll(gamma, log_terms_fn, n):
    b = gamma - 2.0
    log_a = math.log(gamma - 1.0) + (gamma - 1.0) * math.log(b)
    return -(n * log_a - gamma * log_terms_fn(b))


def scaling_function_fit(samples, constrained=True):
    """Maximum-likelihood fit of P(x) = a / (b + x)^gamma to scaled volumes.

    With `constrained` the normalization and unit-mean conditions tie a and b to
    gamma > 2. Otherwise (b, gamma) are free and a follows from normalization.
    """
    x = np.asarray(getattr(samples, "scaled_samples", samples), dtype=float)
    if len(x) == 0 or np.any(x <= 0):
        raise FitError("scaling-function fit needs positive samples")
    n = len(x)
    if not constrained:
        return _unconstrained_volume_fit(x)

    def log_terms(b):
        return float(np.sum(np.log(b + x)))

    lower = 2.0 + 1e-6
    result = optimize.minimize_scalar(
        _constrained_nll, bounds=(lower, GAMMA_UPPER_BOUND), args=(log_terms, n),
        method="bounded", options={"xatol": 1e-8},
    )
    gamma = float(result.x)
    if gamma - lower < 1e-3:
        raise FitError(
            f"maximum-likelihood gamma sits at the lower bound 2 (mean undefined); "
            f"rerun with constrained=False for the free (b, gamma) fit"
        )
    if GAMMA_UPPER_BOUND - gamma < 1e-3:
        raise FitError(f"maximum-likelihood gamma ran into the upper bound {GAMMA_UPPER_BOUND}")

    h = 1e-4 * gamma
    f0 = _constrained_nll(gamma, log_terms, n)
    curvature = (_constrained_nll(gamma + h, log_terms, n) - 2 * f0 + _constrained_nll(gamma - h, log_terms, n)) / h**2
    stderr = 1.0 / math.sqrt(curvature) if curvature > 0 else float("nan")
    a, b = volume_law_constants(gamma)
    logger.info("Volume law fit: gamma=%.4f +/- %.4f on %d samples", gamma, stderr, n)
    return VolumeLawFit(a, b, gamma, stderr, n, -f0, constrained=True)


def _unconstrained_volume_fit(x):
    n = len(x)

    def nll(params):
        log_b, log_shape = params
        b, shape = math.exp(log_b), math.exp(log_shape)
        gamma = 1.0 + shape
        return -(n * (math.log(shape) + shape * log_b) - gamma * float(np.sum(np.log(b + x))))

    result = optimize.minimize(nll, x0=[0.0, math.log(2.0)], method="Nelder-Mead",
                               options={"xatol": 1e-8, "fatol": 1e-8, "maxiter": 4000})
    if not result.success:
        raise FitError(f"free volume-law fit did not converge: {result.message}")
    b = math.exp(result.x[0])
    gamma = 1.0 + math.exp(result.x[1])
    a = (gamma - 1.0) * b ** (gamma - 1.0)

    h = 1e-4
    plus = nll([result.x[0], result.x[1] + h])
    minus = nll([result.x[0], result.x[1] - h])
    curvature = (plus - 2 * result.fun + minus) / h**2
    stderr_log_shape = 1.0 / math.sqrt(curvature) if curvature > 0 else float("nan")
    return VolumeLawFit(a, b, gamma, (gamma - 1.0) * stderr_log_shape, n, -float(result.fun), constrained=False)


def gamma_factor(alpha, gamma):
    """E[x^alpha] under the volume law: (gamma-2)^alpha G(1+alpha) G(gamma-alpha-1) / G(gamma-1)."""
    if not gamma > 2:
        raise DomainError(f"gamma_factor needs gamma > 2, got gamma={gamma}")
    if not alpha > -1:
        raise DomainError(f"gamma_factor needs alpha > -1, got alpha={alpha}")
    if not alpha < gamma - 1:
        raise DomainError(f"gamma_factor needs alpha < gamma - 1 = {gamma - 1}, got alpha={alpha}")
    log_value = (
        alpha * math.log(gamma - 2.0)
        + special.gammaln(1.0 + alpha)
        + special.gammaln(gamma - alpha - 1.0)
        - special.gammaln(gamma - 1.0)
    )
    return float(math.exp(log_value))


def predicted_mean_impact(c, alpha, mean_volume, gamma):
    """c <V>^alpha F(alpha, gamma), in bps of the spread."""
    return float(c * mean_volume**alpha * gamma_factor(alpha, gamma))


def constraint_coefficient(alpha, V0=DEFAULT_V0, Delta0=DEFAULT_DELTA0):
    """c on the constraint line: Delta0 / V0^alpha."""
    return Delta0 / V0**alpha


def constraint_relation(firms, V0=DEFAULT_V0, Delta0=DEFAULT_DELTA0):
    residuals = {}
    for firm in firms:
        if not firm.fitted:
            continue
        residuals[firm.firm] = math.log(firm.c) + firm.alpha * math.log(V0) - math.log(Delta0)
    values = np.array(list(residuals.values()))
    rms = float(np.sqrt(np.mean(values**2))) if len(values) else float("nan")
    return ConstraintResiduals(V0, Delta0, residuals, rms)


def fit_constraint(firms):
    """Estimate (V0, Delta0) by regressing ln c_i on alpha_i (slope -ln V0, intercept ln Delta0)."""
    fitted = [f for f in firms if f.fitted and f.c > 0]
    if len(fitted) < 3:
        raise DegenerateStatisticError(f"constraint fit needs at least 3 fitted firms, got {len(fitted)}")
    alphas = np.array([f.alpha for f in fitted])
    if np.ptp(alphas) == 0:
        raise DegenerateStatisticError("all firms share one exponent; the constraint line is undefined")
    result = stats.linregress(alphas, np.log([f.c for f in fitted]))
    return ConstraintEstimate(
        V0=float(math.exp(-result.slope)),
        Delta0=float(math.exp(result.intercept)),
        stderr_log_V0=float(result.stderr),
        stderr_log_Delta0=float(result.intercept_stderr),
        r_value=float(result.rvalue),
        n_firms=len(fitted),
    )


def one_tick_bps(tick_log, sigma):
    """bps of the spread moved by the mid-quote when one side of the book moves one tick."""
    return 0.5 * tick_log / sigma


def participation_weighted_alpha(firms):
    """(alpha_bar, covered) with pi_i renormalized over the fitted firms."""
    fitted = [f for f in firms if f.alpha is not None]
    covered = float(sum(f.pi for f in fitted))
    if not fitted or covered == 0:
        return float("nan"), 0.0
    return float(sum(f.pi * f.alpha for f in fitted) / covered), covered


def alpha_correlation(alpha_bars, market_alphas):
    """Pearson correlation of per-stock alpha_bar with alpha_M."""
    x = np.asarray(alpha_bars, dtype=float)
    y = np.asarray(market_alphas, dtype=float)
    if len(x) < 2:
        raise DegenerateStatisticError(f"correlation over stocks needs at least 2 stocks, got {len(x)}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateStatisticError("correlation undefined: one of the exponent sets has zero variance")
    return float(stats.pearsonr(x, y)[0])


def cross_firm_statistics(firms, market_alphas):
    """Participation-weighted exponents per stock and the cross-firm statistics.

    `market_alphas` maps stock label to alpha_M. Undefined statistics are
    flagged in the result notes rather than raised.
    """
    by_stock = {}
    for firm in firms:
        by_stock.setdefault(firm.stock_label, []).append(firm)

    alpha_bar, covered = {}, {}
    for label, members in sorted(by_stock.items()):
        alpha_bar[label], covered[label] = participation_weighted_alpha(members)
    result = CrossFirmStatistics(alpha_bar, covered, dict(market_alphas))

    labels = [label for label in sorted(alpha_bar) if label in market_alphas and not math.isnan(alpha_bar[label])]
    try:
        result.pearson = alpha_correlation([alpha_bar[s] for s in labels], [market_alphas[s] for s in labels])
    except DegenerateStatisticError as e:
        result.pearson_note = str(e)
        result.notes.append(f"pearson: {e}")

    xs, ys = [], []
    for label, members in by_stock.items():
        usable = [f for f in members if f.mean_impact > 0]
        if not usable:
            continue
        volume_scale = np.mean([f.mean_volume for f in usable])
        impact_scale = np.mean([f.mean_impact for f in usable])
        xs.extend(f.mean_volume / volume_scale for f in usable)
        ys.extend(f.mean_impact / impact_scale for f in usable)
    result.n_slope_points = len(xs)
    if len(xs) < MIN_FIT_POINTS or np.ptp(np.log(xs)) == 0:
        result.slope_note = f"slope needs at least {MIN_FIT_POINTS} firms with distinct volumes, got {len(xs)}"
        result.notes.append(f"slope: {result.slope_note}")
    else:
        fit = stats.linregress(np.log(xs), np.log(ys))
        result.slope, result.stderr_slope = float(fit.slope), float(fit.stderr)
    return result
