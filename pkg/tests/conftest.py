import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from vpd import cli


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six generated+prepared scenes shared by training/eval tests."""
    root = tmp_path_factory.mktemp("smallds")
    raw = root / "raw"
    data = root / "data"
    assert cli.main(["gen-data", "--scenes", "6", "--out", str(raw), "--seed", "11"]) == 0
    assert cli.main([
        "prep", "--in", str(raw), "--out", str(data),
        "--sigma", "0.01", "--outlier-prob", "0.02", "--seed", "11",
    ]) == 0
    return data


@pytest.fixture(scope="session")
def clean_dataset(tmp_path_factory):
    """Four noiselessly prepared scenes (sigma=0, smoothing off)."""
    root = tmp_path_factory.mktemp("cleands")
    raw = root / "raw"
    data = root / "data"
    assert cli.main(["gen-data", "--scenes", "4", "--out", str(raw), "--seed", "23"]) == 0
    assert cli.main([
        "prep", "--in", str(raw), "--out", str(data), "--sigma", "0", "--no-kalman",
    ]) == 0
    return data


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
