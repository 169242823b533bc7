"""Design-stage strategies that reconstruct a hypothetical randomized experiment.

Every function here reads covariates and treatment only; none can reach the
sealed outcomes of a :class:`~embedexp.dataset.BlindedDataset`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from ._canon import canonical_json, to_jsonable
from .dataset import BlindedDataset, DesignLock
from .errors import ConfigurationError, EmptyDesignError
from .numerics import (
    CovarianceMatrix,
    DesignMatrix,
    FitResult,
    LrtResult,
    assignment_min_cost,
    logistic_newton,
    logistic_probabilities,
    lrt_compare,
    mahalanobis_matrix,
)

PARSIMONIOUS_TERMS = ("age", "height", "sex")
RICH_TERMS = ("age", "age^2", "height", "height^2", "sex", "sex*age", "sex*height")
MATCH_COVARIATES = ("age", "height", "sex")

FEV_TRIM_RULES = (
    {"when": {"sex": 0}, "ranges": {"age": [10, 18], "height": [60, 69]}},
    {"when": {"sex": 1}, "ranges": {"age": [9, 18], "height": [58, 72]}},
)

EXPERIMENT_KINDS = ("A", "B", "C", "D.1", "D.2", "E")


@dataclass(frozen=True)
class AcceptanceCriterion:
    """Balance calipers an assignment must satisfy to be accepted.

    ``smd_calipers`` bound |mean_t - mean_c| / sd for continuous covariates,
    where sd is the standard deviation over all units being randomized.
    ``proportion_calipers`` bound the absolute difference in proportions.
    """

    smd_calipers: Mapping[str, float] = field(default_factory=lambda: {"age": 0.2, "height": 0.2})
    proportion_calipers: Mapping[str, float] = field(default_factory=lambda: {"sex": 0.1})

    def __post_init__(self):
        for v in [*self.smd_calipers.values(), *self.proportion_calipers.values()]:
            if not v > 0:
                raise ConfigurationError("acceptance calipers must be positive")

    def to_dict(self) -> dict:
        return {
            "smd_calipers": {k: float(v) for k, v in self.smd_calipers.items()},
            "proportion_calipers": {k: float(v) for k, v in self.proportion_calipers.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AcceptanceCriterion":
        return cls(dict(d.get("smd_calipers", {})), dict(d.get("proportion_calipers", {})))


@dataclass(frozen=True)
class Pair:
    treated: int
    control: int
    distance: float


@dataclass(frozen=True)
class HypotheticalExperiment:
    kind: str
    n_treated: int
    n_control: int
    criterion: AcceptanceCriterion | None = None
    pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}")
        if self.kind in ("D.1", "D.2", "E") and self.n_treated != self.n_control:
            raise ConfigurationError(f"experiment {self.kind} needs equal group sizes")
        if self.kind == "D.2" and self.criterion is None:
            raise ConfigurationError("experiment D.2 needs an acceptance criterion")
        if self.kind == "E" and len(self.pairs) != self.n_treated:
            raise ConfigurationError("experiment E needs one pair per treated unit")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind, "n_treated": self.n_treated, "n_control": self.n_control}
        if self.criterion is not None:
            d["criterion"] = self.criterion.to_dict()
        if self.pairs:
            d["pairs"] = [list(p) for p in self.pairs]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "HypotheticalExperiment":
        crit = d.get("criterion")
        return cls(
            d["kind"], int(d["n_treated"]), int(d["n_control"]),
            AcceptanceCriterion.from_dict(crit) if crit else None,
            tuple((int(a), int(b)) for a, b in d.get("pairs", ())),
        )


@dataclass(frozen=True)
class DesignResult:
    method: str
    retained: tuple[int, ...]
    experiments: tuple[HypotheticalExperiment, ...] = ()
    pairs: tuple[Pair, ...] = ()
    strata: Mapping[int, str] | None = None
    stratum_weights: Mapping[str, float] | None = None
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        retained = tuple(sorted(int(i) for i in self.retained))
        if len(set(retained)) != len(retained):
            raise ConfigurationError("retained ids are not distinct")
        object.__setattr__(self, "retained", retained)
        keep = set(retained)
        for p in self.pairs:
            if p.treated not in keep or p.control not in keep:
                raise ConfigurationError(f"pair ({p.treated}, {p.control}) has a member not retained")
            if not p.distance >= 0:
                raise ConfigurationError("pair distances must be non-negative")

    def experiment(self, kind: str) -> HypotheticalExperiment:
        for e in self.experiments:
            if e.kind == kind:
                return e
        raise ConfigurationError(f"design {self.method!r} does not instantiate experiment {kind}")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "method": self.method,
            "retained": list(self.retained),
            "experiments": [e.to_dict() for e in self.experiments],
            "pairs": [[p.treated, p.control, float(p.distance)] for p in self.pairs],
            "provenance": to_jsonable(dict(self.provenance)),
        }
        if self.strata is not None:
            d["strata"] = {str(k): v for k, v in sorted(self.strata.items())}
            d["stratum_weights"] = {k: float(v) for k, v in sorted(self.stratum_weights.items())}
        return d

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DesignResult":
        strata = d.get("strata")
        return cls(
            method=d["method"],
            retained=tuple(int(i) for i in d["retained"]),
            experiments=tuple(HypotheticalExperiment.from_dict(e) for e in d.get("experiments", ())),
            pairs=tuple(Pair(int(t), int(c), float(dist)) for t, c, dist in d.get("pairs", ())),
            strata={int(k): v for k, v in strata.items()} if strata is not None else None,
            stratum_weights=dict(d["stratum_weights"]) if strata is not None else None,
            provenance=dict(d.get("provenance", {})),
        )


@dataclass(frozen=True)
class PropensityModel:
    terms: tuple[str, ...]
    fit: FitResult
    ids: np.ndarray
    scores: np.ndarray
    sd: float
    treatment: np.ndarray
    tests: tuple[tuple[str, LrtResult], ...] = ()

    def score_of(self) -> dict[int, float]:
        return {int(i): float(s) for i, s in zip(self.ids, self.scores)}


def _counts(ds: BlindedDataset, ids) -> tuple[int, int]:
    w = ds.treatment[ds.positions(ids)]
    return int(w.sum()), int(len(w) - w.sum())


def design_none(ds: BlindedDataset) -> DesignResult:
    n_t, n_c = _counts(ds, ds.ids)
    return DesignResult(
        "none", tuple(int(i) for i in ds.ids),
        (HypotheticalExperiment("A", n_t, n_c),),
        provenance={"discarded": []},
    )


def trim_by_ranges(ds: BlindedDataset, rules: Sequence[Mapping[str, Any]] = FEV_TRIM_RULES) -> DesignResult:
    """Keep units whose continuous covariates fall in their stratum's closed ranges.

    Each rule is ``{"when": {binary covariate: value}, "ranges": {covariate: [lo, hi]}}``;
    the ``when`` predicates of different rules must pick disjoint units.
    """
    for r in rules:
        for var, (lo, hi) in r["ranges"].items():
            if lo > hi:
                raise ConfigurationError(f"trim range for {var} is not ordered: [{lo}, {hi}]")
    n = len(ds)
    owner = np.full(n, -1)
    for k, r in enumerate(rules):
        hit = np.ones(n, dtype=bool)
        for var, val in r.get("when", {}).items():
            hit &= ds.column(var) == val
        if np.any(hit & (owner >= 0)):
            raise ConfigurationError("trim rules overlap: a unit matches more than one rule")
        owner[hit] = k
    if np.any(owner < 0):
        bad = int(ds.ids[np.flatnonzero(owner < 0)[0]])
        raise ConfigurationError(f"unit {bad} matches no trim rule")

    keep = np.ones(n, dtype=bool)
    reasons: dict[int, str] = {}
    for k, r in enumerate(rules):
        mine = owner == k
        for var, (lo, hi) in r["ranges"].items():
            x = ds.column(var)
            for pos in np.flatnonzero(mine & keep & ((x < lo) | (x > hi))):
                side = f"< {lo}" if x[pos] < lo else f"> {hi}"
                reasons[int(ds.ids[pos])] = f"{var} {x[pos]:g} {side}"
                keep[pos] = False
    retained = tuple(int(i) for i in ds.ids[keep])
    if not retained:
        raise EmptyDesignError("trimming discarded every unit")
    n_t, n_c = _counts(ds, retained)
    return DesignResult(
        "trim", retained, (HypotheticalExperiment("B", n_t, n_c),),
        provenance={
            "rules": to_jsonable(list(rules)),
            "discarded": [{"id": i, "reason": reasons[i]} for i in sorted(reasons)],
        },
    )


def sturges_edges(x: np.ndarray) -> list[float]:
    """Equal-width cutpoints spanning the data, with Sturges' bin count."""
    k = math.ceil(math.log2(len(x)) + 1)
    return [float(e) for e in np.linspace(float(np.min(x)), float(np.max(x)), k + 1)]


def _bin_index(x: np.ndarray, edges: Sequence[float]) -> np.ndarray:
    # right-closed bins (a, b], the first one closed on the left too
    idx = np.searchsorted(np.asarray(edges, dtype=float), x, side="left")
    return np.maximum(idx, 1)


def coarsened_stratify(
    ds: BlindedDataset,
    bins: Mapping[str, Sequence[float]] | None = None,
    exact: Sequence[str] = ("sex",),
    continuous: Sequence[str] = ("age", "height"),
) -> DesignResult:
    """Coarsened exact matching.

    Units sharing a joint bin signature form a stratum; strata lacking either
    a treated or a control unit are discarded. Missing cutpoints default to
    Sturges equal-width bins over the pooled sample.
    """
    bins = dict(bins or {})
    edges = {}
    for var in continuous:
        e = bins.get(var)
        if e is None:
            e = sturges_edges(ds.column(var))
        e = [float(v) for v in e]
        if any(b <= a for a, b in zip(e, e[1:])):
            raise ConfigurationError(f"cutpoints for {var} must be strictly increasing")
        edges[var] = e
    codes = [_bin_index(ds.column(v), edges[v]) for v in continuous]
    codes += [np.asarray(ds.column(v)) for v in exact]
    labels = np.array(["|".join(str(int(c)) for c in sig) for sig in zip(*codes)]) if codes else np.full(len(ds), "all")
    w = ds.treatment
    keep = np.zeros(len(ds), dtype=bool)
    for lab in np.unique(labels):
        m = labels == lab
        if w[m].any() and (1 - w[m]).any():
            keep |= m
    if not keep.any():
        raise EmptyDesignError("no stratum contains both treated and control units")
    retained_ids = ds.ids[keep]
    strata = {int(i): str(lab) for i, lab in zip(retained_ids, labels[keep])}
    treated_labels = labels[keep & (w == 1)]
    uniq, counts = np.unique(treated_labels, return_counts=True)
    weights = {str(u): float(c) / len(treated_labels) for u, c in zip(uniq, counts)}
    n_t, n_c = _counts(ds, retained_ids)
    discarded = [{"id": int(i), "reason": f"stratum {lab} lacks one group"} for i, lab in zip(ds.ids[~keep], labels[~keep])]
    return DesignResult(
        "stratify", tuple(int(i) for i in retained_ids), (HypotheticalExperiment("C", n_t, n_c),),
        strata=strata, stratum_weights=weights,
        provenance={"cutpoints": edges, "exact": list(exact), "discarded": discarded},
    )


def fit_propensity(
    ds: BlindedDataset,
    candidates: Sequence[Sequence[str]] = (PARSIMONIOUS_TERMS, RICH_TERMS),
    alpha: float = 0.05,
) -> PropensityModel:
    """Fit each candidate logistic model and keep the most parsimonious adequate one.

    Candidates are listed from smallest to richest. Each is tested against the
    richest by a likelihood-ratio test; the first one not rejected at ``alpha``
    is selected.
    """
    if not candidates:
        raise ConfigurationError("need at least one propensity candidate model")
    w = ds.treatment
    fits = []
    for terms in candidates:
        X = DesignMatrix.from_covariates(ds.covariates(terms), terms)
        fits.append((tuple(terms), X, logistic_newton(X, w)))
    chosen = fits[-1]
    tests = []
    richest = fits[-1]
    for terms, X, fit in fits[:-1]:
        lrt = lrt_compare(richest[2], fit, len(richest[0]) - len(terms))
        tests.append((",".join(terms), lrt))
        if lrt.p_value >= alpha:
            chosen = (terms, X, fit)
            break
    terms, X, fit = chosen
    scores = logistic_probabilities(fit, X)
    return PropensityModel(
        terms, fit, ds.ids.copy(), scores, float(np.std(scores, ddof=1)), ds.treatment.copy(), tuple(tests)
    )


def discard_nonoverlap(ds: BlindedDataset, pm: PropensityModel, iterate: bool = False) -> DesignResult:
    """Drop units whose score lies outside the other group's score range."""
    w = ds.treatment
    lookup = pm.score_of()
    score = np.array([lookup[int(i)] for i in ds.ids])
    keep = np.ones(len(ds), dtype=bool)
    reasons: dict[int, str] = {}
    while True:
        t, c = keep & (w == 1), keep & (w == 0)
        if not t.any() or not c.any():
            raise EmptyDesignError("overlap discarding removed an entire group")
        lo_c, hi_c = score[c].min(), score[c].max()
        lo_t, hi_t = score[t].min(), score[t].max()
        drop_t = t & ((score < lo_c) | (score > hi_c))
        drop_c = c & ((score < lo_t) | (score > hi_t))
        drop = drop_t | drop_c
        for pos in np.flatnonzero(drop):
            grp = "treated" if w[pos] else "control"
            reasons[int(ds.ids[pos])] = f"{grp} score {score[pos]:.6f} outside opposite range"
        keep &= ~drop
        if not (iterate and drop.any()):
            break
    if not (keep & (w == 1)).any() or not (keep & (w == 0)).any():
        raise EmptyDesignError("overlap discarding removed an entire group")
    retained = tuple(int(i) for i in ds.ids[keep])
    n_t, n_c = _counts(ds, retained)
    disc = sorted(reasons)
    return DesignResult(
        "overlap", retained, (),
        provenance={
            "propensity_terms": list(pm.terms),
            "iterate": iterate,
            "n_treated": n_t, "n_control": n_c,
            "discarded": [{"id": i, "reason": reasons[i]} for i in disc],
        },
    )


def caliper_match(
    overlap: DesignResult,
    pm: PropensityModel,
    caliper_sd_multiple: float = 1.0,
    criterion: AcceptanceCriterion | None = None,
) -> DesignResult:
    """Greedy one-to-one nearest-score matching without replacement.

    Treated units are visited in descending score order (ties: smaller id);
    each takes the unused control with the closest score inside the caliper
    (ties: smaller id). Treated units with no control in reach are dropped.
    """
    if not caliper_sd_multiple > 0:
        raise ConfigurationError("caliper multiple must be positive")
    caliper = caliper_sd_multiple * pm.sd
    lookup = pm.score_of()
    treat = {int(i): int(w) for i, w in zip(pm.ids, pm.treatment)}
    t_ids = sorted((i for i in overlap.retained if treat[i] == 1), key=lambda i: (-lookup[i], i))
    c_ids = np.array(sorted(i for i in overlap.retained if treat[i] == 0), dtype=np.int64)
    if not t_ids or not len(c_ids):
        raise EmptyDesignError("caliper matching needs both groups")
    c_scores = np.array([lookup[int(i)] for i in c_ids])
    free = np.ones(len(c_ids), dtype=bool)
    pairs, reasons = [], {}
    for tid in t_ids:
        gap = np.where(free, np.abs(c_scores - lookup[tid]), np.inf)
        j = int(np.argmin(gap))  # c_ids sorted, so ties go to the smaller id
        if gap[j] <= caliper:
            free[j] = False
            pairs.append(Pair(tid, int(c_ids[j]), float(gap[j])))
        else:
            reasons[tid] = "no unused control within caliper"
    if not pairs:
        raise EmptyDesignError("caliper matching formed no pairs")
    for cid in c_ids[free]:
        reasons[int(cid)] = "control not selected"
    k = len(pairs)
    retained = tuple(sorted([p.treated for p in pairs] + [p.control for p in pairs]))
    crit = criterion or AcceptanceCriterion()
    return DesignResult(
        "ps-caliper", retained,
        (HypotheticalExperiment("D.1", k, k), HypotheticalExperiment("D.2", k, k, crit)),
        pairs=tuple(pairs),
        provenance={
            "caliper_sd_multiple": caliper_sd_multiple,
            "caliper": caliper,
            "score_sd": pm.sd,
            "propensity_terms": list(pm.terms),
            "order": "treated by descending score, nearest control, ties by smaller id",
            "reference_ids": list(overlap.retained),
            "discarded": [{"id": i, "reason": reasons[i]} for i in sorted(reasons)],
        },
    )


def optimal_match(
    overlap: DesignResult,
    covariates: Sequence[str],
    ds: BlindedDataset,
) -> DesignResult:
    """Pair every treated unit with a distinct control minimizing the total
    squared Mahalanobis distance; the covariance comes from all units
    retained by ``overlap``.
    """
    sub = ds.subset(overlap.retained)
    Z = sub.covariates(covariates)
    S = CovarianceMatrix.estimate(Z, covariates)
    w = sub.treatment
    t_pos, c_pos = np.flatnonzero(w == 1), np.flatnonzero(w == 0)
    if not len(t_pos) or not len(c_pos):
        raise EmptyDesignError("optimal matching needs both groups")
    cost = mahalanobis_matrix(Z[t_pos], Z[c_pos], S)
    sol = assignment_min_cost(cost)
    pairs = tuple(
        Pair(int(sub.ids[t]), int(sub.ids[c_pos[j]]), float(cost[r, j]))
        for r, (t, j) in enumerate(zip(t_pos, sol.columns))
    )
    k = len(pairs)
    retained = tuple(sorted([p.treated for p in pairs] + [p.control for p in pairs]))
    used = {p.control for p in pairs}
    return DesignResult(
        "optimal-pair", retained,
        (HypotheticalExperiment("E", k, k, pairs=tuple((p.treated, p.control) for p in pairs)),),
        pairs=pairs,
        provenance={
            "covariates": list(covariates),
            "covariance": S.matrix.tolist(),
            "total_distance": sol.total,
            "reference_ids": list(overlap.retained),
            "discarded": [{"id": int(i), "reason": "control not selected"} for i in sub.ids[c_pos] if int(i) not in used],
        },
    )


def freeze(design: DesignResult, protocol: Mapping[str, Any]) -> DesignLock:
    return DesignLock.create(design, to_jsonable(dict(protocol)))
