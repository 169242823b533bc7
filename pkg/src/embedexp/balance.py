"""Covariate balance diagnostics for a design."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .dataset import BlindedDataset
from .design import MATCH_COVARIATES, RICH_TERMS, DesignResult
from .errors import NotApplicableError, UndefinedStatisticError
from .numerics import CovarianceMatrix, mahalanobis_matrix

SMD_TERMS = RICH_TERMS
CONTINUOUS = ("age", "height")


def _groups(design: DesignResult | None, ds: BlindedDataset) -> BlindedDataset:
    return ds if design is None else ds.subset(design.retained)


def smd(design: DesignResult | None, ds: BlindedDataset, terms: Sequence[str] = SMD_TERMS) -> dict[str, float]:
    """Standardized mean differences, treated minus control over sqrt((s_t^2 + s_c^2)/2).

    ``design=None`` evaluates the whole dataset (the "before" phase).
    """
    sub = _groups(design, ds)
    w = sub.treatment
    if w.all() or not w.any():
        raise UndefinedStatisticError("SMD needs both groups among retained units")
    X = sub.covariates(terms)
    out = {}
    for k, term in enumerate(terms):
        xt, xc = X[w == 1, k], X[w == 0, k]
        vt = xt.var(ddof=1) if len(xt) > 1 else 0.0
        vc = xc.var(ddof=1) if len(xc) > 1 else 0.0
        pooled = math.sqrt((vt + vc) / 2)
        diff = xt.mean() - xc.mean()
        if pooled == 0:
            if diff == 0:
                out[term] = 0.0
                continue
            raise UndefinedStatisticError(f"SMD undefined for {term}: zero pooled SD")
        out[term] = float(diff / pooled)
    return out


@dataclass(frozen=True)
class KsResult:
    statistic: float
    p_value: float
    method: str


def _ks_path(x: np.ndarray, y: np.ndarray):
    """Observed lattice path of the pooled sort: counts at each tie-block end."""
    z = np.concatenate([x, y])
    is_x = np.concatenate([np.ones(len(x), bool), np.zeros(len(y), bool)])
    order = np.argsort(z, kind="mergesort")
    z, is_x = z[order], is_x[order]
    ends = np.flatnonzero(np.append(z[1:] != z[:-1], True)) + 1  # steps consumed at block ends
    cum_x = np.cumsum(is_x)
    i = cum_x[ends - 1]
    j = ends - i
    return ends, i, j


def ks_exact_p(m: int, n: int, block_ends: np.ndarray, d_int: int) -> float:
    """P(max |i*n - j*m| >= d_int) over uniformly random orderings.

    The maximum is taken only at ``block_ends`` (tie-block boundaries of the
    pooled sample), which makes this the exact permutation law under ties.
    """
    N = m + n
    check = np.zeros(N + 1, dtype=bool)
    check[block_ends] = True
    cur = np.zeros(m + 1)
    cur[0] = 1.0
    i_idx = np.arange(m + 1)
    rejected = 0.0
    for k in range(N):
        j_idx = k - i_idx
        valid = (j_idx >= 0) & (j_idx <= n)
        left = N - k
        px = np.where(valid, (m - i_idx) / left, 0.0)
        py = np.where(valid, (n - j_idx) / left, 0.0)
        nxt = cur * py
        nxt[1:] += (cur * px)[:-1]
        if check[k + 1]:
            jj = k + 1 - i_idx
            bad = (jj >= 0) & (jj <= n) & (np.abs(i_idx * n - jj * m) >= d_int)
            rejected += nxt[bad].sum()
            nxt[bad] = 0.0
        cur = nxt
    return float(min(max(rejected, 0.0), 1.0))


def ks_two_sample(x, y, method: str = "auto") -> KsResult:
    """Two-sample Kolmogorov-Smirnov test.

    ``method="auto"`` uses the exact permutation law when the smaller sample
    has at most 30 values or the pooled sample has ties, and the asymptotic
    Kolmogorov law with effective-n correction otherwise.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("KS test needs two non-empty samples")
    m, n = len(x), len(y)
    ends, i, j = _ks_path(x, y)
    gaps = np.abs(i * n - j * m)
    d_int = int(gaps.max())
    D = d_int / (m * n)
    if method == "auto":
        ties = len(ends) < m + n
        method = "exact" if min(m, n) <= 30 or ties else "asymptotic"
    if d_int == 0:
        return KsResult(0.0, 1.0, method)
    if method == "exact":
        p = ks_exact_p(m, n, ends, d_int)
    elif method == "asymptotic":
        en = math.sqrt(m * n / (m + n))
        p = float(stats.kstwobign.sf((en + 0.12 + 0.11 / en) * D))
    else:
        raise ValueError(f"unknown KS method {method!r}")
    return KsResult(float(D), p, method)


@dataclass(frozen=True)
class GroupSummary:
    n: int
    age_mean: float
    age_sd: float
    height_mean: float
    height_sd: float
    male: float


@dataclass(frozen=True)
class BalanceRow:
    n: int
    treated: GroupSummary
    control: GroupSummary

    def to_dict(self) -> dict:
        return {"n": self.n, "treated": vars(self.treated), "control": vars(self.control)}


def _summ(age, height, sex) -> GroupSummary:
    sd = lambda v: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0  # noqa: E731
    return GroupSummary(len(age), float(age.mean()), sd(age), float(height.mean()), sd(height), float(sex.mean()))


def balance_table(design: DesignResult | None, ds: BlindedDataset) -> BalanceRow:
    sub = _groups(design, ds)
    w = sub.treatment == 1
    a, h, s = sub.column("age"), sub.column("height"), sub.column("sex")
    return BalanceRow(len(sub), _summ(a[w], h[w], s[w]), _summ(a[~w], h[~w], s[~w]))


@dataclass(frozen=True)
class PairDistances:
    pairs: tuple[tuple[int, int], ...]
    distances: np.ndarray
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> float:
        return float(self.distances.sum())


def pair_distances(
    design: DesignResult,
    ds: BlindedDataset,
    covariates: Sequence[str] = MATCH_COVARIATES,
    bin_width: float = 0.5,
) -> PairDistances:
    """Squared Mahalanobis distance within each design pair.

    The covariance is estimated over the design's reference units (the
    post-overlap sample for matched designs), else over its retained units.
    """
    if not design.pairs:
        raise NotApplicableError(f"design {design.method!r} has no pairs")
    ref = design.provenance.get("reference_ids") or design.retained
    S = CovarianceMatrix.estimate(ds.subset(ref).covariates(covariates), covariates)
    Zt = ds.subset([p.treated for p in design.pairs]).covariates(covariates)
    Zc = ds.subset([p.control for p in design.pairs]).covariates(covariates)
    L = S.cholesky()
    diff = np.linalg.solve(L, (Zt - Zc).T)
    d = (diff**2).sum(axis=0)
    top = max(bin_width, math.ceil(d.max() / bin_width) * bin_width)
    edges = np.arange(0.0, top + bin_width / 2, bin_width)
    counts, _ = np.histogram(d, bins=edges)
    return PairDistances(tuple((p.treated, p.control) for p in design.pairs), d, edges, counts)


@dataclass(frozen=True)
class PlausibilityVerdict:
    p_values: dict[str, float]
    plausible: bool
    alpha: float

    def to_dict(self) -> dict:
        return {"p_values": self.p_values, "plausible": self.plausible, "alpha": self.alpha}


def welch_p(xt: np.ndarray, xc: np.ndarray) -> float:
    vt = xt.var(ddof=1) / len(xt) if len(xt) > 1 else 0.0
    vc = xc.var(ddof=1) / len(xc) if len(xc) > 1 else 0.0
    diff = xt.mean() - xc.mean()
    if vt + vc == 0:
        return 1.0 if diff == 0 else 0.0
    return float(stats.ttest_ind(xt, xc, equal_var=False).pvalue)


def two_proportion_p(xt: np.ndarray, xc: np.ndarray) -> float:
    pt, pc = xt.mean(), xc.mean()
    pool = (xt.sum() + xc.sum()) / (len(xt) + len(xc))
    se = math.sqrt(pool * (1 - pool) * (1 / len(xt) + 1 / len(xc)))
    if se == 0:
        return 1.0 if pt == pc else 0.0
    return float(2 * stats.norm.sf(abs(pt - pc) / se))


def assess_plausibility(design: DesignResult | None, ds: BlindedDataset, alpha: float = 0.05) -> PlausibilityVerdict:
    """Unpaired screens: Welch t for age and height, two-proportion z for sex."""
    sub = _groups(design, ds)
    w = sub.treatment == 1
    if w.all() or not w.any():
        raise UndefinedStatisticError("plausibility screen needs both groups")
    p = {v: welch_p(sub.column(v)[w], sub.column(v)[~w]) for v in CONTINUOUS}
    p["sex"] = two_proportion_p(sub.column("sex")[w], sub.column("sex")[~w])
    return PlausibilityVerdict(p, all(v >= alpha for v in p.values()), alpha)


@dataclass
class BalanceReport:
    design_method: str
    smd_before: dict[str, float]
    smd_after: dict[str, float]
    ks: dict[str, dict[str, KsResult]]
    table: BalanceRow
    verdict: PlausibilityVerdict
    pair_distances: PairDistances | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "design_method": self.design_method,
            "smd": {"before": self.smd_before, "after": self.smd_after},
            "ks": {
                var: {phase: vars(r) for phase, r in phases.items()} for var, phases in self.ks.items()
            },
            "table": self.table.to_dict(),
            "verdict": self.verdict.to_dict(),
        }
        if self.pair_distances is not None:
            pdist = self.pair_distances
            d["pair_distances"] = {
                "distances": [float(v) for v in pdist.distances],
                "edges": [float(v) for v in pdist.edges],
                "counts": [int(c) for c in pdist.counts],
                "max": float(pdist.distances.max()),
                "total": pdist.total,
            }
        return d

    def love_csv(self) -> str:
        rows = [("term", "phase", "value")]
        for phase, vals in (("before", self.smd_before), ("after", self.smd_after)):
            rows += [(t, phase, repr(v)) for t, v in vals.items()]
        return _csv(rows)

    def ks_csv(self) -> str:
        rows = [("covariate", "phase", "statistic", "p_value", "method")]
        for var, phases in self.ks.items():
            rows += [(var, ph, repr(r.statistic), repr(r.p_value), r.method) for ph, r in phases.items()]
        return _csv(rows)

    def histogram_csv(self) -> str:
        rows = [("bin_low", "bin_high", "count")]
        if self.pair_distances is not None:
            e, c = self.pair_distances.edges, self.pair_distances.counts
            rows += [(repr(float(e[k])), repr(float(e[k + 1])), str(int(c[k]))) for k in range(len(c))]
        return _csv(rows)


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def balance_report(design: DesignResult, ds: BlindedDataset, alpha: float = 0.05) -> BalanceReport:
    sub = ds.subset(design.retained)
    ks = {}
    for var in CONTINUOUS:
        before = ks_two_sample(ds.column(var)[ds.treatment == 1], ds.column(var)[ds.treatment == 0])
        after = ks_two_sample(sub.column(var)[sub.treatment == 1], sub.column(var)[sub.treatment == 0])
        ks[var] = {"before": before, "after": after}
    return BalanceReport(
        design.method,
        smd(None, ds),
        smd(design, ds),
        ks,
        balance_table(design, ds),
        assess_plausibility(design, ds, alpha),
        pair_distances(design, ds) if design.pairs else None,
    )
