import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "scripts"))

from synth import FirmSpec, KernelSpec, SyntheticManifest, simulate  # noqa: E402

DATA_DIR = ROOT / "data"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte-Carlo acceptance tests (deselect with -m 'not slow')")


@pytest.fixture
def raw_sample_path():
    return DATA_DIR / "raw_sample.csv"


@pytest.fixture
def small_manifest():
    """Three firms, long-memory signs, mild impact noise."""
    return SyntheticManifest(
        n_trades=20_000,
        seed=11,
        firms=(
            FirmSpec(firm_id=101, weight=0.5, alpha=0.25, mean_volume=60_000.0, metaorder_tail=1.3),
            FirmSpec(firm_id=202, weight=0.3, alpha=0.4, mean_volume=30_000.0, metaorder_tail=1.5),
            FirmSpec(firm_id=303, weight=0.2, alpha=0.1, mean_volume=90_000.0, metaorder_tail=1.4,
                     kernel=KernelSpec(2.0, 5.0, 0.8)),
        ),
        impact_noise=0.2,
        noise_scale=0.5,
        stock_label="TST",
    )


@pytest.fixture
def small_tape(small_manifest):
    return simulate(small_manifest)
