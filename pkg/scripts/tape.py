"""
tape.py

Description:
    Reads raw tick-tape files (one row per executed fill), merges the fills a
    single market order produced into one trade, drops trades whose quote move
    contradicts their sign, and builds the immutable tick-time Tape every
    estimator works on. Also reads and writes the canonical processed-tape file.

    Raw files are delimiter-separated text with a header naming at least the
    columns second, buyer_id, seller_id, sign, shares, price, bid_quote,
    ask_quote. Optional bid_before / ask_before columns carry the quote prevailing
    before the fill; without them the quote before a fill is the quote recorded on
    the preceding row, since the exchange stamps quotes at the end of each second.

Dependencies:
    numpy, pandas
"""

import csv
import functools
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from errors import (
    ConfigError,
    DataError,
    EmptyTapeError,
    RowError,
    RowErrorBudgetExceeded,
    SchemaError,
)

logger = logging.getLogger(__name__)

DEFAULT_ACTIVITY_FLOOR = 10_000
DEFAULT_MISMATCH_THRESHOLD = 0.05
QUOTE_MODES = ("price", "logmid")
RAW_COLUMNS = ("second", "buyer_id", "seller_id", "sign", "shares", "price", "bid_quote", "ask_quote")
OPTIONAL_RAW_COLUMNS = ("bid_before", "ask_before")
PROCESSED_COLUMNS = ("tick", "trigger_id", "sign", "volume", "quote_before", "quote_after")

_INT_COLUMNS = {"second", "buyer_id", "seller_id", "sign", "shares"}
_QUOTE_COLUMNS = ("bid_quote", "ask_quote", "bid_before", "ask_before")


@dataclass(frozen=True)
class TradeRecord:
    second: int
    buyer_id: int
    seller_id: int
    sign: int
    shares: int
    price: float
    bid_quote: float
    ask_quote: float
    bid_before: float | None = None
    ask_before: float | None = None

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")
        if self.shares < 1:
            raise ValueError(f"shares must be >= 1, got {self.shares}")
        if not self.price > 0:
            raise ValueError(f"price must be positive, got {self.price}")

    @property
    def trigger_id(self):
        return self.buyer_id if self.sign == 1 else self.seller_id

    @property
    def notional(self):
        return self.shares * self.price

    @property
    def has_quote_before(self):
        return self.bid_before is not None and self.ask_before is not None


@dataclass(frozen=True)
class Trade:
    tick: int
    trigger_id: int
    sign: int
    volume: float
    quote_before: float
    quote_after: float
    second: int | None = None
    shares: int | None = None

    @property
    def signed_move(self):
        return self.sign * (self.quote_after - self.quote_before)


@dataclass(frozen=True)
class RawSchema:
    """Column layout of a raw tape file.

    `columns` maps logical column names to the header names used in the file;
    unmapped logical columns are looked up under their own name.
    """
    delimiter: str = ","
    quote_mode: str = "price"
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.quote_mode not in QUOTE_MODES:
            raise ConfigError(f"quote_mode must be one of {QUOTE_MODES}, got {self.quote_mode!r}")

    def header_name(self, logical):
        return self.columns.get(logical, logical)


@dataclass
class ParseResult:
    records: list
    errors: list

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def mid_quote(bid, ask, quote_mode="price"):
    """Log mid-quote q = (ln a + ln b) / 2; in logmid mode the quotes are already logs."""
    if quote_mode == "price":
        _check_price_quotes(bid, ask)
        return 0.5 * (math.log(ask) + math.log(bid))
    return 0.5 * (ask + bid)


def _check_price_quotes(bid, ask):
    if not (bid > 0 and ask > 0):
        raise DataError(f"price-mode quotes must be positive, got bid={bid}, ask={ask}")


def log_spread(bid, ask, quote_mode="price"):
    if quote_mode == "price":
        _check_price_quotes(bid, ask)
        return math.log(ask) - math.log(bid)
    return ask - bid


def _field_problem(column, value, quote_mode):
    if isinstance(value, float) and not math.isfinite(value):
        return "not finite"
    if column == "shares" and value < 1:
        return "shares must be >= 1"
    if column == "price" and value <= 0:
        return "price must be positive"
    if quote_mode == "price" and column in _QUOTE_COLUMNS and value <= 0:
        return "quote must be positive in price mode"
    return None


def parse_raw(lines, schema=None, max_row_errors=None):
    """Parse raw tape rows into TradeRecords, collecting malformed rows.

    A missing schema column is fatal (SchemaError). A row whose fields cannot be
    converted, or that violates the record invariants, becomes a RowError and the
    remaining rows are still parsed unless more than `max_row_errors` accumulate.
    """
    schema = schema or RawSchema()
    reader = csv.reader(lines, delimiter=schema.delimiter)
    header = next(reader, None)
    if header is None:
        return ParseResult([], [])
    header = [name.strip() for name in header]

    positions = {}
    missing = []
    for logical in RAW_COLUMNS:
        name = schema.header_name(logical)
        if name not in header:
            missing.append(name)
        else:
            positions[logical] = header.index(name)
    if missing:
        raise SchemaError(f"raw tape is missing column(s): {', '.join(missing)}")
    for logical in OPTIONAL_RAW_COLUMNS:
        name = schema.header_name(logical)
        if name in header:
            positions[logical] = header.index(name)

    records = []
    errors = []
    for row in reader:
        if not row or all(not cell.strip() for cell in row):
            continue
        line = reader.line_num
        values = {}
        failed = None
        for logical, pos in positions.items():
            raw = row[pos].strip() if pos < len(row) else ""
            try:
                values[logical] = int(raw) if logical in _INT_COLUMNS else float(raw)
            except ValueError:
                failed = RowError(line, logical, raw, "not a number")
                break
            problem = _field_problem(logical, values[logical], schema.quote_mode)
            if problem:
                failed = RowError(line, logical, raw, problem)
                break
        if failed is None:
            try:
                records.append(TradeRecord(**values))
            except ValueError as e:
                failed = RowError(line, "*", ",".join(row), str(e))
        if failed is not None:
            errors.append(failed)
            logger.warning("Skipping malformed row: %s", failed)
            if max_row_errors is not None and len(errors) > max_row_errors:
                raise RowErrorBudgetExceeded(
                    f"{len(errors)} malformed rows exceed the budget of {max_row_errors} (last: {failed})"
                )

    logger.info("Parsed %d raw records (%d malformed rows)", len(records), len(errors))
    return ParseResult(records, errors)


def read_raw(path, schema=None, max_row_errors=None):
    with open(path, newline="") as handle:
        return parse_raw(handle, schema=schema, max_row_errors=max_row_errors)


def write_raw(records, path, delimiter=","):
    """Write TradeRecords in the raw format, including pre-trade quote columns when known."""
    with_before = any(r.has_quote_before for r in records)
    columns = list(RAW_COLUMNS) + (list(OPTIONAL_RAW_COLUMNS) if with_before else [])
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, delimiter=delimiter, lineterminator="\n")
        writer.writerow(columns)
        for r in records:
            writer.writerow([_format_value(getattr(r, name)) for name in columns])


def _format_value(value):
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def _record_quotes(records, quote_mode):
    """Per-record (q_before, q_after) log mid-quotes."""
    before = []
    after = []
    previous = None
    for r in records:
        q_after = mid_quote(r.bid_quote, r.ask_quote, quote_mode)
        if r.has_quote_before:
            q_before = mid_quote(r.bid_before, r.ask_before, quote_mode)
        elif previous is not None:
            q_before = previous
        else:
            q_before = q_after
        before.append(q_before)
        after.append(q_after)
        previous = q_after
    return before, after


def aggregate(records, quote_mode="price"):
    """Merge consecutive records sharing (second, triggering firm, sign) into single trades.

    The merged volume is the sum of shares x price over the run; the quote before
    comes from the first record of the run and the quote after from the last.
    """
    before, after = _record_quotes(records, quote_mode)
    trades = []
    run_key = None
    for i, r in enumerate(records):
        key = (r.second, r.trigger_id, r.sign)
        if key == run_key:
            last = trades[-1]
            trades[-1] = replace(
                last,
                volume=last.volume + r.notional,
                shares=last.shares + r.shares,
                quote_after=after[i],
            )
            continue
        run_key = key
        trades.append(Trade(
            tick=len(trades),
            trigger_id=r.trigger_id,
            sign=r.sign,
            volume=r.notional,
            quote_before=before[i],
            quote_after=after[i],
            second=r.second,
            shares=r.shares,
        ))
    logger.info("Aggregated %d records into %d trades", len(records), len(trades))
    return trades


def records_as_trades(records, quote_mode="price"):
    """One trade per record, without merging fills (the unprocessed treatment)."""
    before, after = _record_quotes(records, quote_mode)
    return [
        Trade(tick=i, trigger_id=r.trigger_id, sign=r.sign, volume=r.notional,
              quote_before=before[i], quote_after=after[i], second=r.second, shares=r.shares)
        for i, r in enumerate(records)
    ]


def lift_to_records(trades, counterparty_id=0):
    """Express trades as raw records in logmid quote mode (zero-width quotes at the mid)."""
    records = []
    for t in trades:
        shares = t.shares if t.shares and (t.volume / t.shares) * t.shares == t.volume else 1
        buyer, seller = (t.trigger_id, counterparty_id) if t.sign == 1 else (counterparty_id, t.trigger_id)
        records.append(TradeRecord(
            second=t.second if t.second is not None else t.tick,
            buyer_id=buyer,
            seller_id=seller,
            sign=t.sign,
            shares=shares,
            price=t.volume / shares,
            bid_quote=t.quote_after,
            ask_quote=t.quote_after,
            bid_before=t.quote_before,
            ask_before=t.quote_before,
        ))
    return records


def mean_log_spread(records, quote_mode="price"):
    if not records:
        raise EmptyTapeError("cannot average the spread of an empty record set")
    return float(np.mean([log_spread(r.bid_quote, r.ask_quote, quote_mode) for r in records]))


@dataclass(frozen=True, eq=False)
class Tape:
    """Immutable tick-time trade sequence; tick t is the t-th array position."""
    stock_label: str
    mean_spread: float
    trigger_id: np.ndarray
    sign: np.ndarray
    volume: np.ndarray
    quote_before: np.ndarray
    quote_after: np.ndarray
    shares: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.sign)
        if n == 0:
            raise EmptyTapeError("a tape needs at least one trade")
        for name in ("trigger_id", "volume", "quote_before", "quote_after"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if not np.all(np.abs(self.sign) == 1):
            raise ValueError("signs must be +1 or -1")
        if not np.all(self.volume > 0):
            raise ValueError("volumes must be positive")
        if not self.mean_spread > 0:
            raise ValueError(f"mean spread must be positive, got {self.mean_spread}")
        for name in ("trigger_id", "sign", "volume", "quote_before", "quote_after", "shares"):
            column = getattr(self, name)
            if column is not None:
                column.setflags(write=False)

    @classmethod
    def from_arrays(cls, stock_label, mean_spread, trigger_id, sign, volume,
                    quote_before, quote_after, shares=None):
        return cls(
            stock_label=str(stock_label),
            mean_spread=float(mean_spread),
            trigger_id=np.array(trigger_id, dtype=np.int64),
            sign=np.array(sign, dtype=np.int64),
            volume=np.array(volume, dtype=np.float64),
            quote_before=np.array(quote_before, dtype=np.float64),
            quote_after=np.array(quote_after, dtype=np.float64),
            shares=None if shares is None else np.array(shares, dtype=np.int64),
        )

    def __len__(self):
        return len(self.sign)

    @property
    def n(self):
        return len(self.sign)

    @property
    def sigma(self):
        """The bps-of-spread unit: sigma = <s> / 100."""
        return self.mean_spread / 100.0

    @cached_property
    def signed_impact(self):
        """epsilon_t (q+_t - q-_t) / sigma per trade, in bps of the spread."""
        out = self.sign * (self.quote_after - self.quote_before) / self.sigma
        out.setflags(write=False)
        return out

    @cached_property
    def _codes(self):
        firms, codes = np.unique(self.trigger_id, return_inverse=True)
        codes = codes.reshape(-1).astype(np.int64)
        firms.setflags(write=False)
        codes.setflags(write=False)
        return firms, codes

    @property
    def firms(self):
        """Sorted firm identifiers."""
        return self._codes[0]

    @property
    def firm_codes(self):
        """Dense code per trade: index of its trigger firm in `firms`."""
        return self._codes[1]

    @cached_property
    def firm_index(self):
        """Firm id -> ascending tick indices S_i it triggered."""
        firms, codes = self._codes
        order = np.argsort(codes, kind="stable")
        bounds = np.searchsorted(codes[order], np.arange(len(firms) + 1))
        index = {}
        for k, firm in enumerate(firms):
            ticks = order[bounds[k]:bounds[k + 1]]
            ticks.setflags(write=False)
            index[int(firm)] = ticks
        return index

    def trade_counts(self):
        return {firm: len(ticks) for firm, ticks in self.firm_index.items()}

    def participation(self):
        """pi_i = |S_i| / N for every firm."""
        return {firm: count / self.n for firm, count in self.trade_counts().items()}

    def firms_above(self, floor=DEFAULT_ACTIVITY_FLOOR):
        return [firm for firm, count in self.trade_counts().items() if count >= floor]

    @property
    def trades(self):
        for t in range(self.n):
            yield Trade(
                tick=t,
                trigger_id=int(self.trigger_id[t]),
                sign=int(self.sign[t]),
                volume=float(self.volume[t]),
                quote_before=float(self.quote_before[t]),
                quote_after=float(self.quote_after[t]),
                shares=None if self.shares is None else int(self.shares[t]),
            )

    def with_trigger_ids(self, trigger_id):
        return replace(self, trigger_id=np.array(trigger_id, dtype=np.int64))

    def take(self, ticks):
        """Sub-tape of the given ticks, re-indexed 0..len(ticks)-1."""
        ticks = np.asarray(ticks, dtype=np.int64)
        return Tape.from_arrays(
            self.stock_label, self.mean_spread,
            self.trigger_id[ticks], self.sign[ticks], self.volume[ticks],
            self.quote_before[ticks], self.quote_after[ticks],
            None if self.shares is None else self.shares[ticks],
        )

    def to_frame(self):
        return pd.DataFrame({
            "tick": np.arange(self.n),
            "trigger_id": self.trigger_id,
            "sign": self.sign,
            "volume": self.volume,
            "quote_before": self.quote_before,
            "quote_after": self.quote_after,
        })


@functools.singledispatch
def filter_mismatches(trades, threshold=DEFAULT_MISMATCH_THRESHOLD):
    """Drop trades whose quote moved against their sign; returns (kept, dropped_fraction).

    Zero moves are kept. Tick indices of the kept trades are re-compacted.
    A dropped fraction above `threshold` is logged as a warning, never raised.
    """
    trades = list(trades)
    kept = [t for t in trades if t.signed_move >= 0]
    kept = [replace(t, tick=i) for i, t in enumerate(kept)]
    fraction = _dropped_fraction(len(trades), len(kept), threshold)
    return kept, fraction


@filter_mismatches.register
def _(tape: Tape, threshold=DEFAULT_MISMATCH_THRESHOLD):
    keep = np.flatnonzero(tape.sign * (tape.quote_after - tape.quote_before) >= 0)
    fraction = _dropped_fraction(tape.n, len(keep), threshold)
    return tape.take(keep), fraction


def _dropped_fraction(total, kept, threshold):
    fraction = (total - kept) / total if total else 0.0
    if fraction > threshold:
        logger.warning(
            "Dropped %.2f%% of trades as sign/quote mismatches (threshold %.2f%%)",
            100 * fraction, 100 * threshold,
        )
    else:
        logger.info("Dropped %d of %d trades as sign/quote mismatches", total - kept, total)
    return fraction


def build_tape(trades, stock_label, mean_spread):
    trades = list(trades)
    if not trades:
        raise EmptyTapeError(f"no trades left to build the {stock_label} tape")
    ticks = [t.tick for t in trades]
    if ticks != list(range(len(trades))):
        raise ValueError("trade ticks must run 0..N-1 without gaps")
    shares = None
    if all(t.shares is not None for t in trades):
        shares = [t.shares for t in trades]
    return Tape.from_arrays(
        stock_label,
        mean_spread,
        [t.trigger_id for t in trades],
        [t.sign for t in trades],
        [t.volume for t in trades],
        [t.quote_before for t in trades],
        [t.quote_after for t in trades],
        shares,
    )


def write_tape(tape, path):
    """Write the canonical processed-tape file (metadata header + CSV, full precision)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        handle.write(f"# stock_label={tape.stock_label}\n")
        handle.write(f"# mean_spread={tape.mean_spread!r}\n")
        tape.to_frame().to_csv(handle, index=False, float_format="%.17g")
    return path


def read_tape(path, mean_spread=None, stock_label=None):
    """Read a canonical processed-tape file; `mean_spread` overrides the header value."""
    meta = {}
    with open(path) as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
    frame = pd.read_csv(path, comment="#")
    missing = [c for c in PROCESSED_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: processed tape is missing column(s): {', '.join(missing)}")
    if frame.empty:
        raise EmptyTapeError(f"{path}: processed tape has no trades")
    if not np.array_equal(frame["tick"].to_numpy(), np.arange(len(frame))):
        raise SchemaError(f"{path}: tick column must run 0..N-1 without gaps")

    if mean_spread is None:
        if "mean_spread" not in meta:
            raise ConfigError(f"{path}: no mean_spread header; supply mean_spread in the config")
        mean_spread = float(meta["mean_spread"])
    label = stock_label or meta.get("stock_label") or Path(path).stem
    return Tape.from_arrays(
        label,
        mean_spread,
        frame["trigger_id"].to_numpy(),
        frame["sign"].to_numpy(),
        frame["volume"].to_numpy(),
        frame["quote_before"].to_numpy(),
        frame["quote_after"].to_numpy(),
    )
