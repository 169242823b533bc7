from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np
import pytest

from embedexp.dataset import load_csv, unseal_outcomes
from embedexp.design import design_none, freeze
from embedexp.synthetic import write_synthetic_csv

ROOT = Path(__file__).resolve().parents[1]
FEV_CANDIDATES = [os.environ.get("EMBEDEXP_FEV_CSV"), ROOT / "data" / "fev.csv"]


def fev_path() -> Path | None:
    for p in FEV_CANDIDATES:
        if p and Path(p).is_file():
            return Path(p)
    return None


def write_csv(path: Path, age, height, sex, w, y) -> Path:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["age", "fev", "ht", "sex", "smoke"])
        for row in zip(age, y, height, sex, w):
            out.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), int(row[3]), int(row[4])])
    return path


@pytest.fixture
def make_ds(tmp_path):
    """Build a BlindedDataset from column arrays via a CSV round trip."""
    count = [0]

    def build(age, height, sex, w, y):
        count[0] += 1
        return load_csv(write_csv(tmp_path / f"d{count[0]}.csv", age, height, sex, w, y))

    return build


@pytest.fixture
def make_ad(make_ds):
    """AnalysisDataset for a given design function (default: no design)."""

    def build(age, height, sex, w, y, design_fn=design_none):
        ds = make_ds(age, height, sex, w, y)
        design = design_fn(ds)
        return unseal_outcomes(ds, freeze(design, {"test": True}), design)

    return build


@pytest.fixture(scope="session")
def synthetic_csv(tmp_path_factory) -> Path:
    return write_synthetic_csv(tmp_path_factory.mktemp("syn") / "syn.csv", seed=11)


@pytest.fixture(scope="session")
def synthetic_ds(synthetic_csv):
    return load_csv(synthetic_csv)


def toy_columns(n=40, seed=0, effect=0.5, noise=1.0):
    rng = np.random.default_rng(seed)
    age = rng.integers(5, 16, n)
    sex = rng.integers(0, 2, n)
    height = np.round(40 + 2 * age + rng.normal(0, 2, n), 1)
    w = np.zeros(n, dtype=int)
    w[rng.permutation(n)[: n // 2]] = 1
    y = 0.1 * height + 0.05 * age + effect * w + rng.normal(0, noise, n)
    return age, height, sex, w, y


_acceptance_lines: list[str] = []


def record_acceptance(line: str) -> None:
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
