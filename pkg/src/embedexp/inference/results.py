from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass
class InferenceResult:
    """One row of the analysis table.

    ``interval_kind`` labels what the interval is: "confidence",
    "fiducial" or "posterior".
    """

    method: str
    n: int
    estimate: float
    interval: tuple[float, float] | None = None
    interval_kind: str = "confidence"
    p_value: float | None = None
    statistic: float | None = None
    draws: int | None = None
    seed: int | None = None
    details: dict[str, Any] = field(default_factory=dict)
    raw_draws: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.interval is not None and self.interval[0] > self.interval[1]:
            raise ValueError("interval lower bound exceeds upper bound")
        if self.p_value is not None and not 0.0 <= self.p_value <= 1.0:
            raise ValueError("p-value outside [0, 1]")

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "n": self.n,
            "estimate": _f(self.estimate),
            "interval": None if self.interval is None else [_f(v) for v in self.interval],
            "interval_kind": self.interval_kind,
            "p_value": _f(self.p_value),
            "statistic": _f(self.statistic),
            "draws": self.draws,
            "seed": self.seed,
        }
        if self.details:
            d["details"] = self.details
        return d

    def draws_csv(self) -> str:
        return draws_csv(self.raw_draws if self.raw_draws is not None else np.empty(0))


def _f(v):
    if v is None:
        return None
    v = float(v)
    if np.isfinite(v):
        return v
    return "inf" if v > 0 else ("-inf" if v < 0 else "nan")


def draws_csv(values: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("draw", "value"))
    w.writerows((k, repr(float(v))) for k, v in enumerate(values))
    return buf.getvalue()


@dataclass(frozen=True)
class AcePosterior:
    draws: np.ndarray
    mean: float
    sd: float
    lower: float
    upper: float

    @classmethod
    def from_draws(cls, draws: np.ndarray) -> "AcePosterior":
        draws = np.asarray(draws, dtype=float)
        lo, hi = np.quantile(draws, [0.025, 0.975])
        sd = float(np.std(draws, ddof=1)) if len(draws) > 1 else 0.0
        return cls(draws, float(draws.mean()), sd, float(lo), float(hi))

    def to_dict(self) -> dict:
        return {
            "mean": self.mean, "sd": self.sd, "interval": [self.lower, self.upper], "draws": len(self.draws),
        }
