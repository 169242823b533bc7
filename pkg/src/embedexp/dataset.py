"""Ingest of the observational data with outcomes kept sealed.

Covariates and treatment are readable from a :class:`BlindedDataset`; the
outcome column is parsed at load time but has no public accessor. Outcomes
become readable only through :func:`unseal_outcomes`, which demands a
:class:`DesignLock` whose content hash matches the design being analysed.
"""

from __future__ import annotations

import csv
import hashlib
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ._canon import content_hash
from .errors import (
    ConsistencyError,
    DataError,
    EmptyInputError,
    ParseError,
    SchemaError,
    TamperError,
)

COVARIATES = ("age", "height", "sex")
FIELDS = ("age", "height", "sex", "treatment", "outcome")

FEV_SCHEMA = {"age": "age", "height": "ht", "sex": "sex", "treatment": "smoke", "outcome": "fev"}

_DEFAULT_CODES = {
    "sex": {"0": 0, "1": 1, "f": 0, "m": 1, "female": 0, "male": 1},
    "treatment": {
        "0": 0, "1": 1, "no": 0, "yes": 1, "non-smoker": 0, "nonsmoker": 0, "smoker": 1,
        "non-current smoker": 0, "current smoker": 1,
    },
}


@dataclass(frozen=True)
class UnitRecord:
    id: int
    age: float
    height: float
    sex: int
    treatment: int
    outcome: float | None = None  # None while sealed


class _Seal:
    """Opaque holder for outcome values. Deliberately exposes nothing."""

    __slots__ = ("_values",)

    def __init__(self, values: np.ndarray):
        self._values = values

    def __repr__(self) -> str:
        return "<sealed outcomes>"

    __str__ = __repr__

    def __reduce__(self):
        raise TypeError("sealed outcomes cannot be serialized")


def _read_seal(seal: _Seal) -> np.ndarray:
    return seal._values


@dataclass(frozen=True)
class CovariateTerm:
    """A product of covariate powers, e.g. ``age^2`` or ``sex*height``."""

    label: str
    factors: tuple[tuple[str, int], ...]

    def evaluate(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        out = None
        for name, power in self.factors:
            col = np.asarray(columns[name], dtype=float) ** power
            out = col if out is None else out * col
        return out


_TERM_RE = re.compile(r"^([a-z_]+)(?:\^(\d+))?$")


def parse_term(label: str) -> CovariateTerm:
    factors: list[tuple[str, int]] = []
    for raw in re.split(r"[*:]", label.replace(" ", "").lower()):
        if raw.endswith("2") and raw[:-1] in COVARIATES:
            raw = raw[:-1] + "^2"  # accept "age2"
        m = _TERM_RE.match(raw)
        if not m or m.group(1) not in COVARIATES:
            raise SchemaError(f"unknown covariate term {label!r}")
        factors.append((m.group(1), int(m.group(2) or 1)))
    return CovariateTerm(label, tuple(factors))


class BlindedDataset:
    """Units with covariates and treatment readable, outcomes sealed.

    Instances are immutable; :meth:`subset` returns a new sealed dataset.
    """

    def __init__(
        self,
        ids: np.ndarray,
        age: np.ndarray,
        height: np.ndarray,
        sex: np.ndarray,
        treatment: np.ndarray,
        seal: _Seal,
        schema_fingerprint: str,
    ):
        if len(ids) == 0:
            raise EmptyInputError("dataset has no units")
        if len(np.unique(ids)) != len(ids):
            raise ConsistencyError("unit ids are not unique")
        self._ids = _frozen(np.asarray(ids, dtype=np.int64))
        self._cols = {
            "age": _frozen(np.asarray(age, dtype=float)),
            "height": _frozen(np.asarray(height, dtype=float)),
            "sex": _frozen(np.asarray(sex, dtype=np.int64)),
            "treatment": _frozen(np.asarray(treatment, dtype=np.int64)),
        }
        self._seal = seal
        self.schema_fingerprint = schema_fingerprint
        self._pos = {int(i): k for k, i in enumerate(self._ids)}

    def __len__(self) -> int:
        return len(self._ids)

    def __repr__(self) -> str:
        return f"BlindedDataset(n={len(self)}, treated={int(self.treatment.sum())})"

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    @property
    def treatment(self) -> np.ndarray:
        return self._cols["treatment"]

    def column(self, name: str) -> np.ndarray:
        if name == "outcome":
            raise DataError("outcomes are sealed until a design lock is presented")
        return self._cols[name]

    def covariates(self, terms: Sequence[str]) -> np.ndarray:
        """Matrix with one column per covariate term (no intercept)."""
        if not terms:
            return np.empty((len(self), 0))
        return np.column_stack([parse_term(t).evaluate(self._cols) for t in terms])

    @property
    def units(self) -> list[UnitRecord]:
        c = self._cols
        return [
            UnitRecord(int(i), float(a), float(h), int(s), int(w))
            for i, a, h, s, w in zip(self._ids, c["age"], c["height"], c["sex"], c["treatment"])
        ]

    def positions(self, ids: Iterable[int]) -> np.ndarray:
        try:
            return np.array([self._pos[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise ConsistencyError(f"unit id {exc.args[0]} is not in the dataset") from None

    def subset(self, ids: Iterable[int]) -> "BlindedDataset":
        pos = self.positions(ids)
        c = self._cols
        return BlindedDataset(
            self._ids[pos], c["age"][pos], c["height"][pos], c["sex"][pos], c["treatment"][pos],
            _Seal(_read_seal(self._seal)[pos]), self.schema_fingerprint,
        )

    def with_outcomes_replaced(self, value: float) -> "BlindedDataset":
        """Copy with every sealed outcome set to ``value`` (for blindness checks)."""
        c = self._cols
        return BlindedDataset(
            self._ids, c["age"], c["height"], c["sex"], c["treatment"],
            _Seal(np.full(len(self), float(value))), self.schema_fingerprint,
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = a.copy()
    a.setflags(write=False)
    return a


def _normalise_schema(schema: Mapping[str, Any] | None) -> tuple[dict[str, str], dict[str, dict[str, int]]]:
    schema = dict(FEV_SCHEMA if schema is None else schema)
    codes_in = schema.pop("codes", {}) or {}
    columns = {}
    for f in FIELDS:
        if f not in schema:
            raise SchemaError(f"schema map lacks an entry for {f!r}")
        columns[f] = str(schema[f])
    codes = {k: dict(v) for k, v in _DEFAULT_CODES.items()}
    for var, mapping in codes_in.items():
        codes[var] = {str(k).strip().lower(): int(v) for k, v in mapping.items()}
    return columns, codes


def load_csv(path: str | Path, schema: Mapping[str, Any] | None = None) -> BlindedDataset:
    """Read a comma-separated file into a :class:`BlindedDataset`.

    Args:
        path: CSV with a header line and one unit per row.
        schema: map from the logical fields (age, height, sex, treatment,
            outcome) to column names, plus an optional ``codes`` table for
            label-coded binaries. Defaults to the public FEV file layout.

    Ids are assigned 1..n in file order.
    """
    columns, codes = _normalise_schema(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInputError(f"{path}: file is empty") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    lower = [h.lower() for h in header]
    index = {}
    for f, col in columns.items():
        if col in header:
            index[f] = header.index(col)
        elif col.lower() in lower:
            index[f] = lower.index(col.lower())
        else:
            raise SchemaError(f"{path}: missing column {col!r} (for {f})")
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")

    values: dict[str, list] = {f: [] for f in FIELDS}
    for rownum, row in enumerate(rows, start=2):
        for f in FIELDS:
            try:
                cell = row[index[f]].strip()
            except IndexError:
                raise ParseError(f"{path}: row {rownum} is missing column {columns[f]!r}") from None
            values[f].append(_parse_cell(cell, f, codes, rownum, path))

    age = np.array(values["age"], dtype=float)
    height = np.array(values["height"], dtype=float)
    outcome = np.array(values["outcome"], dtype=float)
    _validate(age, height, outcome, path)
    fingerprint = hashlib.sha256(
        (",".join(header) + "|" + ",".join(f"{f}={columns[f]}" for f in FIELDS)).encode()
    ).hexdigest()
    return BlindedDataset(
        np.arange(1, len(rows) + 1),
        age,
        height,
        np.array(values["sex"], dtype=np.int64),
        np.array(values["treatment"], dtype=np.int64),
        _Seal(_frozen(outcome)),
        fingerprint,
    )


def _parse_cell(cell: str, field_name: str, codes, rownum: int, path: Path):
    if field_name in codes:
        key = cell.lower()
        if key in codes[field_name]:
            return codes[field_name][key]
        try:
            num = float(cell)
        except ValueError:
            raise ParseError(f"{path}: row {rownum}: cannot read {field_name} value {cell!r}") from None
        if num in (0.0, 1.0):
            return int(num)
        raise ParseError(f"{path}: row {rownum}: {field_name} must be binary, got {cell!r}")
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"{path}: row {rownum}: non-numeric {field_name} value {cell!r}") from None


def _validate(age, height, outcome, path):
    bad = np.flatnonzero((age < 0) | (age > 120) | (age != np.round(age)))
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 2}: age must be an integer in [0, 120]")
    bad = np.flatnonzero((height <= 0) | (height >= 100))
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 2}: height must lie in (0, 100)")
    bad = np.flatnonzero(~np.isfinite(outcome))
    if bad.size:
        raise ParseError(f"{path}: row {bad[0] + 2}: outcome is not finite")
    bad = np.flatnonzero(outcome <= 0)
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 2}: outcome must be positive")


@dataclass(frozen=True)
class VariableSummary:
    n: int
    min: float
    q25: float
    mean: float
    median: float
    q75: float
    max: float


@dataclass(frozen=True)
class CovariateSummary:
    n: int
    variables: dict[str, VariableSummary]

    def proportion(self, name: str) -> float:
        return self.variables[name].mean

    def to_dict(self) -> dict:
        return {"n": self.n, "variables": {k: vars(v) for k, v in self.variables.items()}}


def summarize(ds: BlindedDataset) -> CovariateSummary:
    """Table-1 style summary; binaries report their proportion as the mean."""
    out = {}
    for name in ("age", "height", "treatment", "sex"):
        x = np.asarray(ds.column(name), dtype=float)
        q25, med, q75 = np.quantile(x, [0.25, 0.5, 0.75])  # type-7 interpolation
        out[name] = VariableSummary(
            len(x), float(x.min()), float(q25), float(x.mean()), float(med), float(q75), float(x.max())
        )
    return CovariateSummary(len(ds), out)


@dataclass(frozen=True)
class DesignLock:
    """Content hash over a frozen design and its pre-registered analysis protocol."""

    design_id: str
    content_hash: str
    protocol: dict = field(hash=False)
    created: str = ""

    @staticmethod
    def compute_hash(design_doc: dict, protocol: dict) -> str:
        return content_hash({"design": design_doc, "protocol": protocol})

    @classmethod
    def create(cls, design, protocol: Mapping[str, Any]) -> "DesignLock":
        doc = design.to_dict()
        protocol = dict(protocol)
        return cls(
            design_id=content_hash(doc)[:16],
            content_hash=cls.compute_hash(doc, protocol),
            protocol=protocol,
            created=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )

    def verify(self, design) -> None:
        if self.compute_hash(design.to_dict(), self.protocol) != self.content_hash:
            raise TamperError("design does not match the hash recorded in its lock")

    def to_dict(self) -> dict:
        return {
            "design_id": self.design_id,
            "content_hash": self.content_hash,
            "protocol": self.protocol,
            "created": self.created,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DesignLock":
        return cls(d["design_id"], d["content_hash"], dict(d["protocol"]), d.get("created", ""))


class AnalysisDataset:
    """The locked design's retained units with outcomes readable."""

    def __init__(self, ds: BlindedDataset, lock: DesignLock, design):
        pos = ds.positions(design.retained)
        self.lock = lock
        self.design = design
        self.ids = _frozen(ds.ids[pos])
        self._cols = {k: _frozen(ds.column(k)[pos]) for k in ("age", "height", "sex", "treatment")}
        self.outcome = _frozen(np.asarray(_read_seal(ds._seal)[pos], dtype=float))
        self._pos = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def treatment(self) -> np.ndarray:
        return self._cols["treatment"]

    def column(self, name: str) -> np.ndarray:
        if name == "outcome":
            return self.outcome
        return self._cols[name]

    def covariates(self, terms: Sequence[str]) -> np.ndarray:
        if not terms:
            return np.empty((len(self), 0))
        return np.column_stack([parse_term(t).evaluate(self._cols) for t in terms])

    def positions(self, ids: Iterable[int]) -> np.ndarray:
        return np.array([self._pos[int(i)] for i in ids], dtype=np.int64)

    def pair_positions(self) -> np.ndarray:
        """(K, 2) positions of (treated, control) for each design pair."""
        if not self.design.pairs:
            return np.empty((0, 2), dtype=np.int64)
        return np.array([[self._pos[p.treated], self._pos[p.control]] for p in self.design.pairs])

    @property
    def units(self) -> list[UnitRecord]:
        c = self._cols
        return [
            UnitRecord(int(i), float(a), float(h), int(s), int(w), float(y))
            for i, a, h, s, w, y in zip(
                self.ids, c["age"], c["height"], c["sex"], c["treatment"], self.outcome
            )
        ]


def unseal_outcomes(ds: BlindedDataset, lock: DesignLock, design) -> AnalysisDataset:
    """Open outcomes for exactly the retained units of a locked design."""
    lock.verify(design)
    missing = set(int(i) for i in design.retained) - set(int(i) for i in ds.ids)
    if missing:
        raise ConsistencyError(f"design retains ids not in the dataset: {sorted(missing)[:5]}")
    return AnalysisDataset(ds, lock, design)
