import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.utils import CHECKED_ENV  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training / benchmark runs (deselect with -m 'not slow')")


@pytest.fixture(autouse=True)
def _unchecked(monkeypatch):
    # a developer's ECGMAMBA_CHECKED=1 must not leak into tests that assume the default
    monkeypatch.delenv(CHECKED_ENV, raising=False)


@pytest.fixture
def checked(monkeypatch):
    monkeypatch.setenv(CHECKED_ENV, "1")


@pytest.fixture
def tiny_dataset(tmp_path):
    """40 synthetic 2-lead one-hot records, 2 classes, 1 s at 100 Hz."""
    from src.data_handler import synth_dataset

    out = tmp_path / "synth"
    synth_dataset(str(out), n_records=40, n_classes=2, n_leads=2, length=100, seed=3, snr=3.0,
                  co_occurrence=0.0)
    return out
