"""
reports.py

Description:
    Writers for the study products: CSV plot-data tables, JSON fit reports and
    the markdown study summary. Floats are written with full precision and JSON
    keys sorted, so a rerun with the same inputs and seed reproduces every file
    byte for byte. NaN and infinities become null in JSON.

Dependencies:
    numpy, pandas
"""

import csv
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.17g"


def jsonable(value):
    """Plain-Python copy of a report value (numpy scalars/arrays, tuples, NaN -> None)."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if hasattr(value, "to_dict") and not isinstance(value, pd.DataFrame):
        return jsonable(value.to_dict())
    return value


def write_json(data, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        json.dump(jsonable(data), handle, indent=2, sort_keys=True, allow_nan=False)
        handle.write("\n")
    return path


def write_frame(frame, path):
    """CSV of a DataFrame with full-precision floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as csvfile:
        writer = csv.writer(csvfile, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def lag_table_frame(table):
    """Long-format frame of a LagTable: one row per (scope, lag)."""
    lags = np.arange(table.L + 1)
    parts = [pd.DataFrame({
        "scope": "MARKET",
        "lag": lags,
        "value": table.market,
        "count": table.market_count,
        "pi": 1.0,
    })]
    for k, firm in enumerate(table.firms):
        parts.append(pd.DataFrame({
            "scope": str(int(firm)),
            "lag": lags,
            "value": table.firm_values[k],
            "count": table.firm_counts[k],
            "pi": table.pi[k],
        }))
    return pd.concat(parts, ignore_index=True)


def firm_summary_frame(firms):
    columns = ["firm", "stock_label", "pi", "n_trades", "mean_volume", "mean_impact", "alpha",
               "stderr_alpha", "c", "predicted_impact", "kappa", "chi"]
    return pd.DataFrame([f.to_dict() for f in firms], columns=columns)


def _fmt(value, digits=4):
    if value is None:
        return "n/a"
    if isinstance(value, float) and not math.isfinite(value):
        return "n/a"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def _trend_word(sign):
    return {1: "increasing", -1: "decreasing", 0: "flat / undefined"}.get(sign, "n/a")


def study_summary_markdown(summary):
    """Markdown summary of a study run, built from the summary.json content."""
    headline = summary.get("headline", {})
    text = (f"# Impact Study Summary\n\n"
            f"**Stock:** {summary.get('stock_label', 'n/a')}\n\n"
            f"**Trades:** {summary.get('n_trades', 'n/a')}\n\n"
            f"**Firms above activity floor:** {summary.get('n_firms_above_floor', 'n/a')}\n\n"
            f"**Status:** {summary.get('status', 'n/a')}\n\n")

    text += "## Exponents\n\n"
    text += f"- **alpha_M:** {_fmt(headline.get('alpha_M'))} +/- {_fmt(headline.get('stderr_alpha_M'))}\n"
    text += f"- **alpha_bar (participation weighted):** {_fmt(headline.get('alpha_bar'))}\n"
    text += f"- **gamma (sign correlation):** {_fmt(headline.get('gamma'))}\n"
    text += f"- **beta (kernel):** {_fmt(headline.get('beta'))}\n"
    text += f"- **beta_c = (1 - gamma) / 2:** {_fmt(headline.get('beta_c'))}\n"
    text += f"- **volume law gamma:** {_fmt(headline.get('volume_gamma'))}\n\n"

    null = summary.get("null_band")
    if null:
        text += "## Shuffled Firm IDs\n\n"
        text += (f"- **Replicates:** {null.get('n_replicates')} (seed {null.get('seed')})\n"
                 f"- **Fraction of firms outside the band:** {_fmt(null.get('exceedance_fraction'), 3)}\n\n")

    tick = summary.get("tick_check")
    if tick:
        text += "## Tick Size\n\n"
        text += (f"- **One tick:** {_fmt(tick.get('one_tick_bps'), 2)} bps of the spread\n"
                 f"- **Delta0:** {_fmt(tick.get('Delta0'), 2)} bps ({_fmt(tick.get('Delta0_in_ticks'), 2)} ticks)\n"
                 f"- **Fitted Delta0:** {_fmt(tick.get('fitted_Delta0'), 2)} bps "
                 f"({_fmt(tick.get('fitted_Delta0_in_ticks'), 2)} ticks)\n\n")

    trends = summary.get("kappa_chi_trends")
    if trends:
        text += "## kappa / chi Trends\n\n"
        for name in sorted(trends):
            text += f"- **{name}:** {_trend_word(trends[name].get('sign'))} (slope {_fmt(trends[name].get('slope'))})\n"
        text += "\n"

    skipped = summary.get("skipped_stages", {})
    if skipped:
        text += "## Skipped Stages\n\n"
        for stage, reason in skipped.items():
            text += f"- **Stage:** {stage} - **Reason:** {reason}\n"
        text += "\n"

    if summary.get("failed_stage"):
        text += "## Failed Stage Details\n\n"
        text += f"- **Stage:** {summary['failed_stage']} - **Error:** {summary.get('error')}\n"
    return text


def write_summary_markdown(summary, path):
    text = study_summary_markdown(summary)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as summary_file:
        summary_file.write(text)
    return text
