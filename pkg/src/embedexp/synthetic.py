"""Synthetic FEV-like data for demonstrations and tests.

The generator mimics the layout and rough shape of the children's lung
function data (age, fev, ht, sex, smoke) but is not that dataset. Numbers it
produces must never be read as replication results.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def synthetic_fev(n: int = 654, seed: int = 0, effect: float = -0.15, outcome_override: float | None = None):
    """Return columns ``age, fev, ht, sex, smoke`` as a dict of arrays.

    Smoking exposure rises steeply with age, so exposed children are older
    and taller, as in the real study. ``effect`` is the additive exposure
    effect on FEV (liters). ``outcome_override`` replaces every FEV value,
    which is used to plant a sentinel.
    """
    rng = np.random.default_rng(seed)
    age = np.clip(np.round(rng.gamma(9.0, 1.1, n)), 3, 19).astype(int)
    sex = rng.integers(0, 2, n)
    growth = np.minimum(age, 13 + 3 * sex)
    ht = np.clip(38.0 + 2.05 * growth + 0.8 * sex * np.maximum(age - 12, 0) + rng.normal(0, 2.2, n), 46.0, 74.0)
    ht = np.round(ht * 2) / 2
    eta = -9.5 + 0.62 * age - 0.2 * sex
    smoke = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(int)
    fev = -4.3 + 0.105 * ht + 0.05 * age + 0.12 * sex + effect * smoke + rng.normal(0, 0.4, n)
    fev = np.round(np.maximum(fev, 0.6), 3)
    if outcome_override is not None:
        fev = np.full(n, float(outcome_override))
    return {"age": age, "fev": fev, "ht": ht, "sex": sex, "smoke": smoke}


def write_synthetic_csv(path: str | Path, **kwargs) -> Path:
    """Write :func:`synthetic_fev` output with the public file's column names."""
    cols = synthetic_fev(**kwargs)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["age", "fev", "ht", "sex", "smoke"])
        for row in zip(cols["age"], cols["fev"], cols["ht"], cols["sex"], cols["smoke"]):
            w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), int(row[3]), int(row[4])])
    return path
