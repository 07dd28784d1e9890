"""
synth.py

Description:
    Generates synthetic trade tapes with known ground truth:

    - signs: each firm executes metaorders (runs of same-sign trades) whose
      lengths L have P(L >= l) = l^-tail; with 1 < tail < 2 the sign correlation
      decays as l^-(tail-1). The firm trading at each tick is drawn by weight.
    - volumes: V = <V_i> x with x from the mean-one law a / (b + x)^gamma,
      quantized to whole shares at the manifest share price.
    - prices: each trade moves the mid-quote by I_t eps_t with
      I_t = sigma c_i V^alpha_i (times optional lognormal noise). The move
      propagates through the kernel G(l) = Gamma0 / (l0^2 + l^2)^(beta/2) of the
      triggering firm (market kernel unless overridden), plus i.i.d. noise eta
      between trades and optional cancellation shocks against the trade sign.

    Every stage draws from its own PCG64 stream spawned from the manifest seed,
    so outputs are pure functions of the manifest.

Usage:
    Build a SyntheticManifest (or load one from JSON) and call simulate() for an
    in-memory Tape, emit_tape() for the canonical tape plus manifest files, or
    emit_raw() for a raw-format file that exercises parsing and aggregation.

Dependencies:
    numpy, scipy
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from errors import ConfigError, EmptyTapeError
from fit import DEFAULT_DELTA0, DEFAULT_V0, volume_law_ppf
from propagator import kernel_form
from tape import Tape, TradeRecord, write_raw, write_tape

logger = logging.getLogger(__name__)

RNG_NAME = "PCG64"
STAGES = ("firms", "signs", "volumes", "impact", "noise", "cancel", "raw")
DEFAULT_MEAN_SPREAD = 0.000951
DEFAULT_SHARE_PRICE = 17.25
DEFAULT_VOLUME_GAMMA = 2.95


@dataclass(frozen=True)
class KernelSpec:
    gamma0: float = 3.5
    l0: float = 21.3
    beta: float = 0.375

    def values(self, lags):
        return kernel_form(lags, self.gamma0, self.l0, self.beta)


@dataclass(frozen=True)
class FirmSpec:
    firm_id: int
    weight: float
    alpha: float = 0.25
    c: float | None = None
    mean_volume: float = 60_000.0
    metaorder_tail: float | None = None
    kernel: KernelSpec | None = None


@dataclass(frozen=True)
class SyntheticManifest:
    n_trades: int
    seed: int
    firms: tuple
    kernel: KernelSpec = field(default_factory=KernelSpec)
    stock_label: str = "SYN"
    mean_spread: float = DEFAULT_MEAN_SPREAD
    share_price: float = DEFAULT_SHARE_PRICE
    noise_scale: float = 0.0
    volume_gamma: float = DEFAULT_VOLUME_GAMMA
    tick_size: float | None = None
    impact_noise: float = 0.0
    cancel_rate: float = 0.0
    cancel_scale: float = 0.5
    fragment_prob: float = 0.0
    V0: float = DEFAULT_V0
    Delta0: float = DEFAULT_DELTA0

    def __post_init__(self):
        object.__setattr__(self, "firms", tuple(self.firms))

    @property
    def sigma(self):
        return self.mean_spread / 100.0

    @property
    def firm_ids(self):
        return np.array([f.firm_id for f in self.firms], dtype=np.int64)

    @property
    def weights(self):
        return np.array([f.weight for f in self.firms], dtype=float)

    def firm_c(self, firm):
        """c_i, from the manifest or from the constraint Delta0 / V0^alpha_i."""
        return firm.c if firm.c is not None else self.Delta0 / self.V0**firm.alpha

    def validate(self):
        if self.n_trades < 0:
            raise ConfigError(f"n_trades must be non-negative, got {self.n_trades}")
        if self.seed is None:
            raise ConfigError("the manifest needs a seed")
        if not self.firms:
            raise ConfigError("the manifest needs at least one firm")
        ids = [f.firm_id for f in self.firms]
        if len(set(ids)) != len(ids):
            raise ConfigError("firm ids must be unique")
        if any(f.weight < 0 for f in self.firms) or not math.isclose(sum(self.weights), 1.0, abs_tol=1e-9):
            raise ConfigError(f"firm weights must be non-negative and sum to 1, got {sum(self.weights)}")
        if not self.volume_gamma > 2:
            raise ConfigError(f"volume_gamma must exceed 2, got {self.volume_gamma}")
        for name in ("mean_spread", "share_price", "V0", "Delta0"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("noise_scale", "impact_noise", "cancel_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("cancel_rate", "fragment_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.tick_size is not None and not self.tick_size > 0:
            raise ConfigError("tick_size must be positive when given")
        for f in self.firms:
            if not f.mean_volume > 0:
                raise ConfigError(f"firm {f.firm_id}: mean_volume must be positive")
            if f.c is not None and not f.c > 0:
                raise ConfigError(f"firm {f.firm_id}: c must be positive")
            _check_tail(f)
        return self

    def to_dict(self):
        out = asdict(self)
        out["firms"] = [asdict(f) for f in self.firms]
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        try:
            kernel = KernelSpec(**data.pop("kernel", {}))
            firms = []
            for entry in data.pop("firms"):
                entry = dict(entry)
                override = entry.pop("kernel", None)
                firms.append(FirmSpec(**entry, kernel=KernelSpec(**override) if override else None))
            return cls(firms=tuple(firms), kernel=kernel, **data)
        except (TypeError, KeyError) as e:
            raise ConfigError(f"invalid manifest: {e}") from e

    @classmethod
    def load(cls, path):
        try:
            with open(path) as handle:
                data = json.load(handle)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: manifest is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")
        return path


def _check_tail(firm):
    tail = firm.metaorder_tail
    if tail is not None and not 1 < tail < 2:
        raise ConfigError(
            f"firm {firm.firm_id}: metaorder_tail {tail} outside (1, 2); "
            f"the sign correlation exponent tail - 1 must lie in (0, 1)"
        )


def stage_rng(seed, stage):
    """Independent generator for one generation stage."""
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return np.random.Generator(np.random.PCG64(children[STAGES.index(stage)]))


def metaorder_signs(rng, n, tail=None):
    """n signs built from metaorders with P(length >= l) = l^-tail; tail None gives i.i.d. signs."""
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if tail is None:
        return rng.choice(np.array([-1, 1]), size=n)
    u = 1.0 - rng.random(n)
    lengths = np.minimum(np.floor(u ** (-1.0 / tail)), n).astype(np.int64)
    runs = int(np.searchsorted(np.cumsum(lengths), n)) + 1
    run_signs = rng.choice(np.array([-1, 1]), size=runs)
    return np.repeat(run_signs, lengths[:runs])[:n]


def generate_signs(manifest):
    """(firm id, sign) per tick."""
    firms = manifest.firms
    for firm in firms:
        _check_tail(firm)
    n = manifest.n_trades
    choice = stage_rng(manifest.seed, "firms").choice(len(firms), size=n, p=manifest.weights)
    rng = stage_rng(manifest.seed, "signs")
    signs = np.empty(n, dtype=np.int64)
    for k, firm in enumerate(firms):
        ticks = np.flatnonzero(choice == k)
        signs[ticks] = metaorder_signs(rng, len(ticks), firm.metaorder_tail)
    return manifest.firm_ids[choice], signs


def sample_scaled_volumes(gamma, size, rng):
    """x = (gamma - 2)(u^(-1/(gamma-1)) - 1) with u uniform on (0, 1]."""
    return volume_law_ppf(1.0 - rng.random(size), gamma)


def _per_tick(manifest, firm_ids, attribute):
    lookup = {f.firm_id: attribute(f) for f in manifest.firms}
    keys = manifest.firm_ids
    table = np.array([lookup[k] for k in keys], dtype=float)
    order = np.argsort(keys)
    return table[order][np.searchsorted(keys[order], firm_ids)]


def generate_volumes(manifest, firm_ids):
    """(volume, shares) per tick; volume = shares x share_price exactly."""
    rng = stage_rng(manifest.seed, "volumes")
    x = sample_scaled_volumes(manifest.volume_gamma, len(firm_ids), rng)
    raw = _per_tick(manifest, firm_ids, lambda f: f.mean_volume) * x
    shares = np.maximum(1, np.rint(raw / manifest.share_price)).astype(np.int64)
    return shares * manifest.share_price, shares


def propagate_impacts(impacts, groups, kernels, noise=None, shocks=None, start=0.0, tick_size=None):
    """Quotes (q_before, q_after) from signed impacts propagated through per-group kernels.

    q_before[t] = start + sum_{t'<t} G_{g(t')}(t - t') impacts[t'] + sum_{t'<t} (noise + shocks)[t']
    q_after[t]  = q_before[t] + impacts[t] + shocks[t]
    """
    impacts = np.asarray(impacts, dtype=float)
    n = len(impacts)
    lags = np.arange(n, dtype=float)
    drift = np.zeros(n)
    for g, spec in enumerate(kernels):
        member = groups == g
        if not member.any() or n < 2:
            continue
        g_full = spec.values(lags)
        g_full[0] = 0.0
        drift += signal.fftconvolve(np.where(member, impacts, 0.0), g_full)[:n]

    shocks = np.zeros(n) if shocks is None else np.asarray(shocks, dtype=float)
    increments = shocks if noise is None else shocks + np.asarray(noise, dtype=float)
    carried = np.concatenate([[0.0], np.cumsum(increments)[:-1]])
    q_before = start + drift + carried
    q_after = q_before + impacts + shocks
    if tick_size:
        q_before = np.round(q_before / tick_size) * tick_size
        q_after = np.round(q_after / tick_size) * tick_size
    return q_before, q_after


def _kernel_groups(manifest, firm_ids):
    kernels = [manifest.kernel]
    group_of = {}
    for firm in manifest.firms:
        if firm.kernel is None:
            group_of[firm.firm_id] = 0
        else:
            kernels.append(firm.kernel)
            group_of[firm.firm_id] = len(kernels) - 1
    groups = _per_tick(manifest, firm_ids, lambda f: group_of[f.firm_id]).astype(np.int64)
    return groups, kernels


def generate_prices(manifest, firm_ids, signs, volumes):
    """(q_before, q_after) per tick in log-price units."""
    n = len(signs)
    sigma = manifest.sigma
    alpha = _per_tick(manifest, firm_ids, lambda f: f.alpha)
    c = _per_tick(manifest, firm_ids, manifest.firm_c)
    impact = sigma * c * np.asarray(volumes, dtype=float) ** alpha
    if manifest.impact_noise > 0:
        s = manifest.impact_noise
        impact *= np.exp(s * stage_rng(manifest.seed, "impact").standard_normal(n) - 0.5 * s * s)
    signed = np.asarray(signs) * impact

    noise = None
    if manifest.noise_scale > 0:
        noise = stage_rng(manifest.seed, "noise").normal(0.0, manifest.noise_scale * sigma, n)
    shocks = None
    if manifest.cancel_rate > 0:
        cancelled = stage_rng(manifest.seed, "cancel").random(n) < manifest.cancel_rate
        shocks = np.where(cancelled, -(1.0 + manifest.cancel_scale) * signed, 0.0)
        logger.debug("Injected %d cancellation shocks", int(cancelled.sum()))

    groups, kernels = _kernel_groups(manifest, firm_ids)
    return propagate_impacts(signed, groups, kernels, noise, shocks,
                             start=math.log(manifest.share_price), tick_size=manifest.tick_size)


def simulate(manifest):
    manifest.validate()
    if manifest.n_trades == 0:
        raise EmptyTapeError("n_trades = 0: a tape needs at least one trade")
    firm_ids, signs = generate_signs(manifest)
    volumes, shares = generate_volumes(manifest, firm_ids)
    q_before, q_after = generate_prices(manifest, firm_ids, signs, volumes)
    logger.info("Simulated %d trades over %d firms (seed %s)", manifest.n_trades, len(manifest.firms), manifest.seed)
    return Tape.from_arrays(manifest.stock_label, manifest.mean_spread, firm_ids, signs, volumes,
                            q_before, q_after, shares)


def emit_tape(manifest, out_dir):
    """Write <label>.tape.csv and manifest.json into out_dir; returns both paths."""
    tape = simulate(manifest)
    out_dir = Path(out_dir)
    tape_path = write_tape(tape, out_dir / f"{manifest.stock_label}.tape.csv")
    manifest_path = manifest.save(out_dir / "manifest.json")
    return tape_path, manifest_path


def raw_records(tape, manifest):
    """Raw fills for a tape in logmid quote mode; some trades split into same-second fragments."""
    rng = stage_rng(manifest.seed, "raw")
    half_spread = 0.5 * manifest.mean_spread
    ids = manifest.firm_ids
    shares_all = tape.shares if tape.shares is not None else np.maximum(
        1, np.rint(tape.volume / manifest.share_price)).astype(np.int64)
    split = rng.random(tape.n) < manifest.fragment_prob

    records = []
    for t in range(tape.n):
        trigger, sign, shares = int(tape.trigger_id[t]), int(tape.sign[t]), int(shares_all[t])
        q_before, q_after = float(tape.quote_before[t]), float(tape.quote_after[t])
        if split[t] and shares >= 2:
            pieces = int(rng.integers(2, min(shares, 3) + 1))
            cuts = np.sort(rng.choice(shares - 1, size=pieces - 1, replace=False) + 1)
            parts = np.diff(np.concatenate([[0], cuts, [shares]]))
        else:
            parts = np.array([shares])
        others = ids[ids != trigger]
        quote = q_before
        for j, part in enumerate(parts):
            counterparty = int(rng.choice(others)) if len(others) else 0
            buyer, seller = (trigger, counterparty) if sign == 1 else (counterparty, trigger)
            after = q_after if j == len(parts) - 1 else q_before + (q_after - q_before) * (j + 1) / len(parts)
            records.append(TradeRecord(
                second=t, buyer_id=buyer, seller_id=seller, sign=sign, shares=int(part),
                price=manifest.share_price,
                bid_quote=after - half_spread, ask_quote=after + half_spread,
                bid_before=quote - half_spread, ask_before=quote + half_spread,
            ))
            quote = after
    return records


def emit_raw(tape, manifest, path):
    records = raw_records(tape, manifest)
    write_raw(records, path)
    logger.info("Wrote %d raw records for %d trades to %s", len(records), tape.n, path)
    return path


def headline_manifest(n_trades=1_000_000, seed=0, n_firms=49, alpha=0.25, correlation_gamma=0.212,
                        kernel=None, volume_gamma=DEFAULT_VOLUME_GAMMA, noise_scale=0.0,
                        stock_label="TEF-SYN", **extra):
    """Headline-valued manifest: one impact exponent, Zipf-like activity, metaorder tail 1 + gamma."""
    ranks = np.arange(1, n_firms + 1)
    weights = ranks ** -0.8
    weights /= weights.sum()
    volumes = np.geomspace(20_000.0, 200_000.0, n_firms)
    firms = tuple(
        FirmSpec(firm_id=9000 + int(k), weight=float(w), alpha=alpha, mean_volume=float(v),
                 metaorder_tail=1.0 + correlation_gamma)
        for k, w, v in zip(ranks, weights, volumes)
    )
    firms = _renormalized(firms)
    return SyntheticManifest(
        n_trades=n_trades, seed=seed, firms=firms, kernel=kernel or KernelSpec(),
        volume_gamma=volume_gamma, noise_scale=noise_scale, stock_label=stock_label, **extra,
    )


def _renormalized(firms):
    """Fix float drift so weights sum to one."""
    total = math.fsum(f.weight for f in firms)
    firms = [replace(f, weight=f.weight / total) for f in firms]
    drift = 1.0 - math.fsum(f.weight for f in firms)
    firms[0] = replace(firms[0], weight=firms[0].weight + drift)
    return tuple(firms)
