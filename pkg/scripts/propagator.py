"""
propagator.py

Description:
    The transient-impact (propagator) model. A trade's impact spreads forward in
    tick time through a kernel G(l), with G(0) = 1 for the trade's own quote move.
    The response then follows from the kernel, the sign correlation and the mean
    instantaneous impact:

        R(l) = R0' G(l)
             + R0 sum_{0<l'<l} G(l-l') C(l')        [+ R0 C(l) with coincident_term]
             + R0 sum_{l'=1}^{H} [G(l+l') - G(l')] C(l')

    with R0' the firm's own R_i(0) in firm scope and R0 = R_M(0). The response is
    linear in the kernel values, so the same system serves the forward
    reconstruction and the kernel inversion.

    Also here: the kernel form G(l) = Gamma0 / (l0^2 + l^2)^(beta/2) and its fit,
    the critical exponent beta_c = (1 - gamma)/2, and the kappa / chi cost
    diagnostics per firm.

Dependencies:
    numpy, scipy, pandas
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy import linalg, optimize, stats

from errors import ConfigError, DomainError, FitError, KernelSolveError
from fit import PowerLawFit
from measure import (
    MARKET,
    LagSeries,
    correlation_by_firm,
    response,
    response_by_firm,
    scope_ticks,
    sign_correlation,
)

logger = logging.getLogger(__name__)

EXTRAPOLATIONS = ("hold-last", "power-tail")
DEFAULT_L_MAX = 500
DEFAULT_COST_HORIZON = 1000
DEFAULT_CONDITION_LIMIT = 1e12
DEFAULT_TAIL_ITERATIONS = 20
TAIL_TOLERANCE = 1e-6


def default_horizon(L_max):
    return 4 * L_max


def kernel_form(lags, gamma0, l0, beta):
    lags = np.asarray(lags, dtype=float)
    return gamma0 / (l0 * l0 + lags * lags) ** (beta / 2.0)


@dataclass(frozen=True, eq=False)
class Kernel:
    """G(1..L_max) with a rule for lags past L_max; G(0) is 1 by convention."""
    values: np.ndarray
    extrapolation: str = "hold-last"
    beta: float | None = None
    fit: PowerLawFit | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if len(values) < 2:
            raise ConfigError(f"a kernel needs L_max >= 2, got {len(values)} values")
        if not np.all(np.isfinite(values)):
            raise ConfigError("kernel values must be finite")
        if self.extrapolation not in EXTRAPOLATIONS:
            raise ConfigError(f"extrapolation must be one of {EXTRAPOLATIONS}")
        if self.extrapolation == "power-tail" and self.beta is None:
            raise ConfigError("power-tail extrapolation needs beta")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_form(cls, gamma0, l0, beta, L_max, extrapolation="power-tail"):
        values = kernel_form(np.arange(1, L_max + 1), gamma0, l0, beta)
        return cls(values, extrapolation, beta if extrapolation == "power-tail" else None)

    @property
    def L_max(self):
        return len(self.values)

    def tail_weights(self, k_max):
        """w[k] for k = 0..k_max so that G(k) = w[k] G(min(k, L_max)) for k >= 1."""
        return _tail_weights(self.L_max, k_max, self.extrapolation, self.beta)

    def at(self, lags):
        lags = np.asarray(lags, dtype=np.int64)
        weights = self.tail_weights(int(lags.max()) if lags.size else 0)
        columns = np.clip(np.minimum(lags, self.L_max) - 1, 0, None)
        out = self.values[columns] * weights[lags]
        return np.where(lags == 0, 1.0, out)

    def with_power_tail(self, beta=None):
        beta = beta if beta is not None else (self.fit.exponent if self.fit else None)
        if beta is None:
            raise ConfigError("no beta given and the kernel carries no fit")
        return replace(self, extrapolation="power-tail", beta=float(beta))

    def to_frame(self):
        return pd.DataFrame({"lag": np.arange(1, self.L_max + 1), "G0": self.values})


@dataclass(frozen=True)
class CostDiagnostics:
    scope: object
    kappa: float
    chi: float
    L: int
    include_zero: bool = False

    def to_dict(self):
        return {"scope": self.scope, "kappa": self.kappa, "chi": self.chi,
                "L": self.L, "include_zero": self.include_zero}


@dataclass(frozen=True, eq=False)
class FirmReconstruction:
    """Market and per-firm responses implied by one kernel."""
    market: LagSeries
    firms: dict
    weights: dict

    def residual(self):
        """max_l |R_M(l) - sum_i pi_i R_i(l)| relative to max_l |R_M(l)|."""
        total = sum(self.weights[firm] * self.firms[firm].values for firm in self.firms)
        scale = float(np.max(np.abs(self.market.values))) or 1.0
        return float(np.max(np.abs(self.market.values - total))) / scale


@dataclass
class KappaChiStudy:
    table: pd.DataFrame
    trends: dict
    flagged: str | None = None
    reconstruction: FirmReconstruction | None = None


def _tail_weights(L_max, k_max, extrapolation, beta):
    k = np.arange(max(k_max, L_max) + 1, dtype=float)
    weights = np.ones_like(k)
    if extrapolation == "power-tail":
        beyond = k > L_max
        weights[beyond] = (k[beyond] / L_max) ** (-beta)
    return weights


def _series(values):
    if isinstance(values, LagSeries):
        return np.asarray(values.values, dtype=float)
    return np.asarray(values, dtype=float)


def response_system(C, R0, L, L_max, H=None, Ri0=None, coincident=False,
                    extrapolation="hold-last", beta=None):
    """(b, M) with R(l) = b[l] + M[l] @ G(1..L_max) for l = 0..L.

    Kernel lags past L_max enter the last column, scaled by the extrapolation weight.
    """
    H = default_horizon(L_max) if H is None else int(H)
    if H < L:
        raise ConfigError(f"tail horizon H={H} must be at least the response horizon L={L}")
    if H < 1:
        raise ConfigError(f"tail horizon H must be positive, got {H}")
    c = _series(C)
    if len(c) < max(H, L) + 1:
        raise ConfigError(f"correlation series reaches lag {len(c) - 1}, lag {max(H, L)} needed")
    own = R0 if Ri0 is None else Ri0
    weights = _tail_weights(L_max, L + H, extrapolation, beta)
    last = L_max - 1

    b = np.zeros(L + 1)
    M = np.zeros((L + 1, L_max))
    b[0] = own
    for lag in range(1, L + 1):
        row = M[lag]
        row[min(lag, L_max) - 1] += own * weights[lag]

        if lag > 1:
            inner = np.arange(1, lag)
            k = lag - inner
            row += np.bincount(np.minimum(k, L_max) - 1, weights=R0 * c[inner] * weights[k], minlength=L_max)
        if coincident:
            b[lag] += R0 * c[lag]

        # G(lag + l') part of the tail sum
        n_inside = min(max(L_max - lag, 0), H)
        row[lag : lag + n_inside] += R0 * c[1 : n_inside + 1]
        if n_inside < H:
            row[last] += R0 * np.dot(c[n_inside + 1 : H + 1], weights[lag + n_inside + 1 : lag + H + 1])
        # -G(l') part of the tail sum
        n_own = min(H, L_max)
        row[:n_own] -= R0 * c[1 : n_own + 1]
        if H > L_max:
            row[last] -= R0 * np.dot(c[L_max + 1 : H + 1], weights[L_max + 1 : H + 1])
    return b, M


def reconstruct_response(kernel, C, R0, Ri0=None, L=None, H=None, coincident=False):
    """Forward model: the response implied by a kernel, a sign correlation and R(0)."""
    L = kernel.L_max if L is None else int(L)
    H = default_horizon(kernel.L_max) if H is None else int(H)
    b, M = response_system(C, R0, L, kernel.L_max, H, Ri0, coincident, kernel.extrapolation, kernel.beta)
    scope = getattr(C, "scope", MARKET)
    return LagSeries(b + M @ kernel.values, None, None, "response", scope)


def _solve(A, y, ridge, condition_limit):
    if ridge > 0:
        normal = A.T @ A
        normal[np.diag_indices_from(normal)] += ridge
        A, y = normal, A.T @ y
    condition = float(np.linalg.cond(A))
    if not np.isfinite(condition) or condition > condition_limit:
        raise KernelSolveError(
            f"kernel system is ill-conditioned (condition number {condition:.3g}); "
            f"increase the ridge parameter",
            condition=condition,
        )
    logger.debug("Kernel system condition number %.3g", condition)
    return linalg.solve(A, y)


def invert_kernel(R, C, R0=None, L_max=DEFAULT_L_MAX, H=None, ridge=0.0, coincident=False,
                  fit_window=None, extrapolation="hold-last", condition_limit=DEFAULT_CONDITION_LIMIT,
                  max_iterations=DEFAULT_TAIL_ITERATIONS):
    """Solve the response system for G(1..L_max) from measured R and C.

    Rows l = 1..L_max form a square system. With extrapolation "power-tail" the
    tail exponent is refitted from the solution and the system re-solved until
    beta settles. The kernel form is fitted to the result over `fit_window`, and
    a power-tail kernel carries the fitted beta past L_max.
    """
    if ridge < 0:
        raise ConfigError(f"ridge must be non-negative, got {ridge}")
    r = _series(R)
    if len(r) < L_max + 1:
        raise ConfigError(f"response series reaches lag {len(r) - 1}, L_max={L_max} needed")
    H = default_horizon(L_max) if H is None else int(H)
    if H < L_max:
        raise ConfigError(f"tail horizon H={H} must be at least L_max={L_max}")
    R0 = float(r[0]) if R0 is None else float(R0)

    beta = None
    mode = "hold-last"
    for iteration in range(max_iterations if extrapolation == "power-tail" else 1):
        b, M = response_system(C, R0, L_max, L_max, H, None, coincident, mode, beta)
        values = _solve(M[1:], r[1 : L_max + 1] - b[1:], ridge, condition_limit)
        if extrapolation != "power-tail":
            break
        try:
            tail_beta = fit_kernel_form(Kernel(values), window=fit_window).exponent
        except (FitError, ConfigError) as e:
            logger.warning("Tail exponent refit failed on iteration %d: %s", iteration, e)
            break
        settled = beta is not None and abs(tail_beta - beta) < TAIL_TOLERANCE
        beta, mode = tail_beta, "power-tail"
        if settled:
            break
    else:
        logger.warning("Tail exponent did not settle after %d iterations", max_iterations)

    kernel = Kernel(values, mode, beta)
    try:
        kernel = replace(kernel, fit=fit_kernel_form(kernel, window=fit_window))
    except FitError as e:
        logger.warning("Kernel form fit failed: %s", e)
    if extrapolation == "power-tail" and kernel.fit is not None:
        kernel = kernel.with_power_tail()
    logger.info("Inverted kernel with L_max=%d, H=%d, ridge=%g", L_max, H, ridge)
    return kernel


def fit_kernel_form(kernel, window=None):
    """Nonlinear least squares of log G(l) on log Gamma0 - (beta/2) log(l0^2 + l^2).

    Returns a PowerLawFit with coefficient Gamma0, exponent beta and scale l0.
    """
    lags = np.arange(1, kernel.L_max + 1, dtype=float)
    values = np.asarray(kernel.values)
    lo, hi = window if window is not None else (1, kernel.L_max)
    keep = (lags >= lo) & (lags <= hi) & (values > 0)
    if np.count_nonzero(keep) < 4:
        raise FitError(f"kernel form fit needs at least 4 positive kernel values in [{lo}, {hi}]")
    x, y = lags[keep], np.log(values[keep])

    def model(l, log_gamma0, l0, beta):
        return log_gamma0 - 0.5 * beta * np.log(l0 * l0 + l * l)

    tail = stats.linregress(np.log(x[len(x) // 2 :]), y[len(y) // 2 :]) if len(x) >= 8 else None
    beta0 = float(np.clip(-tail.slope, -4.0, 4.0)) if tail is not None else 0.5
    l0_guess = 10.0
    p0 = [y[0] + 0.5 * beta0 * math.log(l0_guess**2 + x[0] ** 2), l0_guess, beta0]
    try:
        params, covariance = optimize.curve_fit(
            model, x, y, p0=p0, bounds=([-np.inf, 0.0, -5.0], [np.inf, np.inf, 5.0]), maxfev=20000,
        )
    except (RuntimeError, ValueError) as e:
        raise FitError(f"kernel form fit did not converge: {e}") from e

    log_gamma0, l0, beta = params
    errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None)) if np.all(np.isfinite(covariance)) else np.full(3, np.nan)
    residuals = y - model(x, *params)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - float(np.sum(residuals**2)) / ss_tot if ss_tot > 0 else 1.0
    gamma0 = math.exp(log_gamma0)
    return PowerLawFit(
        coefficient=gamma0,
        exponent=float(beta),
        stderr_exponent=float(errors[2]) if np.isfinite(errors[2]) else 0.0,
        fit_window=(float(x[0]), float(x[-1])),
        r_squared=r_squared,
        n_points=len(x),
        stderr_coefficient=float(gamma0 * errors[0]),
        scale=float(l0),
        stderr_scale=float(errors[1]),
    )


def critical_beta(gamma):
    """beta_c = (1 - gamma) / 2 for a long-memory flow, 0 < gamma < 1."""
    if not 0 < gamma < 1:
        raise DomainError(f"critical beta needs a long-memory flow with 0 < gamma < 1, got gamma={gamma}")
    return (1.0 - gamma) / 2.0


def cost_from_series(R, C, L=DEFAULT_COST_HORIZON, include_zero=False, scope=MARKET):
    """kappa = mean of R(l) and chi = sum of C(l), over l = 1..L (from 0 with include_zero)."""
    r, c = _series(R), _series(C)
    if len(r) < L + 1 or len(c) < L + 1:
        raise ConfigError(f"cost diagnostics need series to lag {L}, got {len(r) - 1} and {len(c) - 1}")
    start = 0 if include_zero else 1
    kappa = float(np.mean(r[start : L + 1]))
    chi = float(np.sum(c[start : L + 1]))
    return CostDiagnostics(scope, kappa, chi, L, include_zero)


def cost_diagnostics(tape, scope=MARKET, L=DEFAULT_COST_HORIZON, include_zero=False, activity_floor=0,
                     min_response_samples=0):
    scope_ticks(tape, scope, activity_floor)
    R = response(tape, scope, L, min_response_samples=min_response_samples)
    C = sign_correlation(tape, scope, L, min_response_samples=min_response_samples)
    return cost_from_series(R, C, L, include_zero, scope)


def _trend(x, y):
    if len(x) < 3 or np.ptp(x) == 0:
        return {"slope": float("nan"), "spearman": float("nan"), "sign": 0}
    slope = float(stats.linregress(x, y).slope)
    rho = float(stats.spearmanr(x, y)[0])
    return {"slope": slope, "spearman": rho, "sign": int(np.sign(slope))}


def reconstruct_by_firm(kernel, responses, correlations, L=None, H=None, coincident=False, firms=None):
    """Kernel reconstructions of the market response and of each firm's.

    A firm enters with its own R_i(0), R0 = R_M(0) and its sign correlation
    divided by its full trade count (LagTable.firm_contribution), weighted by its
    tape-wide participation. Over every firm of the tables the weighted firm
    reconstructions add up to the market one.
    """
    L = kernel.L_max if L is None else int(L)
    H = default_horizon(kernel.L_max) if H is None else int(H)
    R_M0 = float(responses.market[0])
    market = reconstruct_response(kernel, correlations.market, R_M0, L=L, H=H, coincident=coincident)
    models, weights = {}, {}
    for firm in (correlations.firms if firms is None else firms):
        firm = int(firm)
        models[firm] = reconstruct_response(kernel, correlations.firm_contribution(firm), R_M0,
                                            Ri0=float(responses.firm_series(firm).values[0]),
                                            L=L, H=H, coincident=coincident)
        weights[firm] = correlations.participation(firm)
    return FirmReconstruction(market, models, weights)


def kappa_chi_study(tape, firms, kernel, L=DEFAULT_COST_HORIZON, H=None, coincident=False,
                    include_zero=False, min_response_samples=0, response_table=None, correlation_table=None):
    """Per-firm kappa (measured and reconstructed from the kernel) and R_i(0) against chi.

    The reconstruction is reconstruct_by_firm over the whole tape, so the
    weighted firm reconstructions add up to the market one. Tables measured
    elsewhere can be passed in to avoid a rerun.
    """
    H = default_horizon(kernel.L_max) if H is None else int(H)
    depth = max(L, H)
    if depth >= tape.n:
        raise ConfigError(f"kappa/chi study needs lags to {depth} but the tape has {tape.n} trades")
    responses = response_table if response_table is not None else response_by_firm(tape, L, min_response_samples)
    correlations = correlation_table if correlation_table is not None else correlation_by_firm(tape, depth, min_response_samples)
    split = reconstruct_by_firm(kernel, responses, correlations, L=L, H=H, coincident=coincident)

    participation = tape.participation()
    rows = []
    for firm in firms:
        R_i = responses.firm_series(firm)
        C_i = correlations.firm_series(firm)
        measured = cost_from_series(R_i, C_i, L, include_zero, firm)
        reconstructed = cost_from_series(split.firms[int(firm)], C_i, L, include_zero, firm)
        rows.append({
            "firm": int(firm),
            "pi": float(participation[int(firm)]),
            "chi": measured.chi,
            "kappa_measured": measured.kappa,
            "kappa_reconstructed": reconstructed.kappa,
            "response0": float(R_i.values[0]),
        })
    table = pd.DataFrame(rows, columns=["firm", "pi", "chi", "kappa_measured", "kappa_reconstructed", "response0"])

    flagged = None
    if len(table) < 2:
        flagged = f"only {len(table)} firm(s); no trend"
        logger.warning("kappa/chi study: %s", flagged)
    chi = table["chi"].to_numpy()
    trends = {name: _trend(chi, table[name].to_numpy())
              for name in ("kappa_measured", "kappa_reconstructed", "response0")}
    return KappaChiStudy(table, trends, flagged, split)
