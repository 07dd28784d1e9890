"""
study_config.py

Description:
    StudyConfig holds every tunable of the impact study. Values come from the
    defaults below, then an optional JSON config file, then command-line flags;
    validate() checks the combined result before any stage runs.

Dependencies:
    Python Standard Library: dataclasses, json
"""

import json
from dataclasses import asdict, dataclass, fields, replace

from errors import ConfigError
from fit import DEFAULT_CORRELATION_WINDOW, DEFAULT_DELTA0, DEFAULT_V0
from measure import DEFAULT_LAG_HORIZON, DEFAULT_MIN_BIN_COUNT, DEFAULT_MIN_RESPONSE_SAMPLES, DEFAULT_N_BINS
from propagator import DEFAULT_L_MAX, default_horizon
from tape import DEFAULT_ACTIVITY_FLOOR, DEFAULT_MISMATCH_THRESHOLD, QUOTE_MODES

DEFAULT_N_REPLICATES = 20
DEFAULT_FACTORIZATION_LAGS = (1, 10, 100)
STUDY_STAGES = ("impact", "lags", "volumes", "firms", "kernel", "costs", "null", "factorization")


@dataclass(frozen=True)
class StudyConfig:
    inputs: tuple = ()
    out_dir: str | None = None
    quote_mode: str = "price"
    delimiter: str = ","
    activity_floor: int = DEFAULT_ACTIVITY_FLOOR
    mismatch_threshold: float = DEFAULT_MISMATCH_THRESHOLD
    max_row_errors: int | None = None
    n_bins: int = DEFAULT_N_BINS
    min_bin_count: int = DEFAULT_MIN_BIN_COUNT
    lag_horizon: int = DEFAULT_LAG_HORIZON
    min_response_samples: int = DEFAULT_MIN_RESPONSE_SAMPLES
    L_max: int = DEFAULT_L_MAX
    horizon: int | None = None
    ridge: float = 0.0
    coincident_term: bool = True
    extrapolation: str = "hold-last"
    impact_fit_window: tuple | None = None
    correlation_fit_window: tuple = DEFAULT_CORRELATION_WINDOW
    kernel_fit_window: tuple | None = None
    volume_gamma_constrained: bool = True
    V0: float = DEFAULT_V0
    Delta0: float = DEFAULT_DELTA0
    n_replicates: int = DEFAULT_N_REPLICATES
    band_sigma: float = 1.0
    band_overlap_stderr: bool = False
    seed: int | None = None
    mean_spread: float | None = None
    include_zero_lag: bool = False
    connected_correlation: bool = False
    workers: int = 1
    factorization_lags: tuple = DEFAULT_FACTORIZATION_LAGS
    lag_method: str = "direct"
    tick_size: float | None = None
    stages: tuple = STUDY_STAGES

    @property
    def H(self):
        return default_horizon(self.L_max) if self.horizon is None else self.horizon

    @property
    def kernel_window(self):
        return tuple(self.kernel_fit_window) if self.kernel_fit_window else (1, self.L_max)

    def merged(self, **overrides):
        """Copy with the non-None overrides applied."""
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return replace(self, **{k: _tupled(v) for k, v in overrides.items() if v is not None})

    def validate(self):
        if self.quote_mode not in QUOTE_MODES:
            raise ConfigError(f"quote_mode must be one of {QUOTE_MODES}, got {self.quote_mode!r}")
        positive_ints = ("n_bins", "lag_horizon", "L_max", "workers")
        for name in positive_ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        non_negative = ("activity_floor", "min_bin_count", "min_response_samples", "ridge", "band_sigma")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.L_max < 2:
            raise ConfigError(f"L_max must be at least 2, got {self.L_max}")
        if self.H < max(self.L_max, 1):
            raise ConfigError(f"horizon H={self.H} must be at least L_max={self.L_max}")
        if not 0 <= self.mismatch_threshold <= 1:
            raise ConfigError(f"mismatch_threshold must lie in [0, 1], got {self.mismatch_threshold}")
        if self.max_row_errors is not None and self.max_row_errors < 0:
            raise ConfigError("max_row_errors must be non-negative")
        if self.n_replicates < 1:
            raise ConfigError(f"n_replicates must be at least 1, got {self.n_replicates}")
        if self.mean_spread is not None and not self.mean_spread > 0:
            raise ConfigError(f"mean_spread must be positive, got {self.mean_spread}")
        if self.extrapolation not in ("hold-last", "power-tail"):
            raise ConfigError(f"extrapolation must be hold-last or power-tail, got {self.extrapolation!r}")
        if self.lag_method not in ("direct", "fft"):
            raise ConfigError(f"lag_method must be direct or fft, got {self.lag_method!r}")
        for name in ("impact_fit_window", "correlation_fit_window", "kernel_fit_window"):
            window = getattr(self, name)
            if window is not None and (len(window) != 2 or not window[0] < window[1]):
                raise ConfigError(f"{name} must be [lo, hi] with lo < hi, got {window}")
        if any(int(lag) < 1 for lag in self.factorization_lags):
            raise ConfigError("factorization_lags must be positive")
        if not self.V0 > 0 or not self.Delta0 > 0:
            raise ConfigError("V0 and Delta0 must be positive")
        if self.tick_size is not None and not self.tick_size > 0:
            raise ConfigError(f"tick_size must be positive when given, got {self.tick_size}")
        unknown = [s for s in self.stages if s not in STUDY_STAGES]
        if unknown:
            raise ConfigError(f"unknown stage(s) {', '.join(unknown)}; choose from {', '.join(STUDY_STAGES)}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as handle:
                data = json.load(handle)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: config is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls().merged(**data)


def _tupled(value):
    return tuple(value) if isinstance(value, list) else value
