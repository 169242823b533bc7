"""Fisher randomization tests and Fiducial intervals in the finite population.

Under the sharp null Y_i(1) = Y_i(0) + tau0 every potential outcome is known:
Y(0) = Y_obs - tau0 * W_obs. A test statistic is evaluated on Y(0) split by
each redrawn assignment, which equals the statistic of the implied observed
outcomes centred at tau0.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..dataset import AnalysisDataset
from ..design import AcceptanceCriterion
from ..errors import ConfigurationError, CriterionTooTightError
from ..numerics import run_blocks
from .bayes import BAYES_COVARIATES, analytic_moments
from .results import InferenceResult

STATISTICS = ("welch_t", "regression_t", "paired_t", "bayes_t")
REGRESSION_COVARIATES = ("age", "height", "sex")
PROBE_TRIES = 100_000
MIN_ACCEPT_RATE = 1e-4
MAX_GRID = 20_000


@dataclass
class RandomizationScheme:
    """Everything needed to redraw assignments of a hypothetical experiment.

    ``pairs`` holds (treated, control) positions of the observed pairing for
    kind E. ``balance_x`` and the calipers encode the D.2 acceptance rule.
    """

    kind: str
    n: int
    n_treated: int
    pairs: np.ndarray | None = None
    criterion: AcceptanceCriterion | None = None
    balance_x: dict[str, np.ndarray] = field(default_factory=dict)
    draws: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("D.1", "D.2", "E"):
            raise ConfigurationError(f"no randomization scheme for experiment {self.kind!r}")
        if self.kind == "E" and (self.pairs is None or len(self.pairs) * 2 != self.n):
            raise ConfigurationError("paired scheme needs pairs covering every unit")
        if self.kind == "D.2" and self.criterion is None:
            raise ConfigurationError("rerandomized scheme needs an acceptance criterion")

    @classmethod
    def for_design(cls, ad: AnalysisDataset, kind: str, draws: int = 10_000, seed: int = 0) -> "RandomizationScheme":
        exp = ad.design.experiment(kind)
        n_t = int(ad.treatment.sum())
        if kind == "E":
            return cls(kind, len(ad), n_t, pairs=ad.pair_positions(), draws=draws, seed=seed)
        if kind == "D.2":
            crit = exp.criterion
            names = [*crit.smd_calipers, *crit.proportion_calipers]
            return cls(kind, len(ad), n_t, criterion=crit,
                       balance_x={v: ad.column(v).astype(float) for v in names}, draws=draws, seed=seed)
        return cls(kind, len(ad), n_t, draws=draws, seed=seed)

    def accepts(self, A: np.ndarray) -> np.ndarray:
        """Row mask of assignments satisfying the D.2 criterion."""
        A = np.atleast_2d(A).astype(float)
        if self.kind != "D.2":
            return np.ones(len(A), dtype=bool)
        n_t = A.sum(axis=1)
        n_c = self.n - n_t
        ok = np.ones(len(A), dtype=bool)
        for name, cal in self.criterion.smd_calipers.items():
            x = self.balance_x[name]
            sd = x.std(ddof=1)
            st = A @ x
            diff = st / n_t - (x.sum() - st) / n_c
            ok &= np.abs(diff) <= cal * sd if sd > 0 else diff == 0
        for name, cal in self.criterion.proportion_calipers.items():
            x = self.balance_x[name]
            st = A @ x
            ok &= np.abs(st / n_t - (x.sum() - st) / n_c) <= cal
        return ok


def _complete_block(rng: np.random.Generator, size: int, n: int, n_t: int) -> np.ndarray:
    keys = rng.random((size, n))
    idx = np.argpartition(keys, n_t - 1, axis=1)[:, :n_t] if n_t else np.empty((size, 0), int)
    A = np.zeros((size, n), dtype=np.int8)
    np.put_along_axis(A, idx, 1, axis=1)
    return A


def _paired_block(rng: np.random.Generator, size: int, n: int, pairs: np.ndarray) -> np.ndarray:
    flip = rng.integers(0, 2, size=(size, len(pairs)), dtype=np.int8)
    A = np.zeros((size, n), dtype=np.int8)
    A[:, pairs[:, 0]] = 1 - flip
    A[:, pairs[:, 1]] = flip
    return A


def draw_assignments(
    scheme: RandomizationScheme, rng: np.random.Generator, size: int, stats: dict | None = None
) -> np.ndarray:
    """``size`` assignments (rows, 1 = treated) drawn from ``scheme``."""
    if scheme.kind == "D.1":
        return _complete_block(rng, size, scheme.n, scheme.n_treated)
    if scheme.kind == "E":
        return _paired_block(rng, size, scheme.n, scheme.pairs)
    kept, got, tries = [], 0, 0
    while got < size:
        batch = _complete_block(rng, max(256, 2 * (size - got)), scheme.n, scheme.n_treated)
        tries += len(batch)
        ok = scheme.accepts(batch)
        kept.append(batch[ok])
        got += int(ok.sum())
        if tries >= PROBE_TRIES and got / tries < MIN_ACCEPT_RATE:
            raise CriterionTooTightError(
                f"acceptance rate {got / tries:.2e} over {tries} tries is below {MIN_ACCEPT_RATE}"
            )
    if stats is not None:
        stats["tries"] = stats.get("tries", 0) + tries
        stats["accepted"] = stats.get("accepted", 0) + got
    return np.concatenate(kept)[:size]


def redraw_assignment(scheme: RandomizationScheme, rng: np.random.Generator) -> np.ndarray:
    return draw_assignments(scheme, rng, 1)[0]


def enumerate_assignments(scheme: RandomizationScheme) -> np.ndarray:
    """Every assignment the scheme can produce (small n only)."""
    n = scheme.n
    if scheme.kind == "E":
        K = len(scheme.pairs)
        flips = np.array(list(itertools.product((0, 1), repeat=K)), dtype=np.int8)
        A = np.zeros((len(flips), n), dtype=np.int8)
        A[:, scheme.pairs[:, 0]] = 1 - flips
        A[:, scheme.pairs[:, 1]] = flips
        return A
    if math.comb(n, scheme.n_treated) > 2_000_000:
        raise ConfigurationError("too many assignments to enumerate")
    rows = []
    for combo in itertools.combinations(range(n), scheme.n_treated):
        a = np.zeros(n, dtype=np.int8)
        a[list(combo)] = 1
        rows.append(a)
    A = np.array(rows)
    return A[scheme.accepts(A)]


def _safe_ratio(num: np.ndarray, den2: np.ndarray, scale: float) -> np.ndarray:
    """num / sqrt(den2) with rounding-level values snapped to zero.

    0/0 is taken as 0 and x/0 as +-inf.
    """
    tiny = 1e-11 * max(scale, 1e-300)
    num = np.where(np.abs(num) <= tiny, 0.0, num)
    den = np.sqrt(np.maximum(den2, 0.0))
    den = np.where(den <= tiny, 0.0, den)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
        return np.where(den == 0, np.where(num == 0, 0.0, np.copysign(np.inf, num)), out)


class StatisticEvaluator:
    """Vectorized test statistics over a batch of assignments.

    Positive values favour treated > control, so two-sided p-values compare
    absolute values.
    """

    def __init__(self, ad: AnalysisDataset, name: str, covariates: Sequence[str] = REGRESSION_COVARIATES):
        if name not in STATISTICS:
            raise ConfigurationError(f"unknown statistic {name!r}")
        self.name = name
        self.n = len(ad)
        self.Z = ad.covariates(covariates)
        if name == "paired_t":
            self.pairs = ad.pair_positions()
            if len(self.pairs) == 0:
                raise ConfigurationError("paired_t needs a paired design")
        if name == "regression_t":
            X = np.column_stack([np.ones(self.n), self.Z])
            Q, _ = np.linalg.qr(X)
            self._Q = Q  # residual maker M = I - Q Q'
            self._dfres = self.n - X.shape[1] - 1

    def _resid(self, V: np.ndarray) -> np.ndarray:
        return V - (V @ self._Q) @ self._Q.T

    def __call__(self, y: np.ndarray, A: np.ndarray) -> np.ndarray:
        A = np.atleast_2d(A).astype(float)
        y = np.asarray(y, dtype=float)
        scale = float(np.abs(y - y.mean()).max()) or 1.0
        ys = y - y.mean()
        if self.name == "welch_t":
            n_t = A.sum(axis=1)
            n_c = self.n - n_t
            st, sst = A @ ys, A @ ys**2
            sc, ssc = ys.sum() - st, (ys**2).sum() - sst
            mt, mc = st / n_t, sc / n_c
            vt = (sst - n_t * mt**2) / (n_t - 1)
            vc = (ssc - n_c * mc**2) / (n_c - 1)
            return _safe_ratio(mt - mc, vt / n_t + vc / n_c, scale)
        if self.name == "paired_t":
            a, b = self.pairs[:, 0], self.pairs[:, 1]
            d = ys[a] - ys[b]
            S = 2 * A[:, a] - 1  # +1 when the first member is treated
            K = len(d)
            mean = S @ d / K
            var = (d @ d - K * mean**2) / (K - 1)
            return _safe_ratio(mean, var / K, scale)
        if self.name == "regression_t":
            Wr = self._resid(A)
            yr = self._resid(ys[None, :])[0]
            sxx = np.einsum("bi,bi->b", Wr, Wr)
            # an assignment collinear with the covariates leaves the effect
            # unidentified; it is scored +inf so it always counts as extreme
            ok = sxx > 1e-10 * np.einsum("bi,bi->b", A, A)
            sxx = np.where(ok, sxx, 1.0)
            sxy = Wr @ yr
            beta = sxy / sxx
            rss = yr @ yr - sxy**2 / sxx
            return np.where(ok, _safe_ratio(beta, rss / self._dfres / sxx, scale), np.inf)
        mean, var = analytic_moments(ys, A, self.Z)
        return np.abs(_safe_ratio(mean, var, scale))

    def estimate(self, y: np.ndarray, w: np.ndarray) -> float:
        """Effect estimate that centres this statistic."""
        w = w.astype(bool)
        if self.name == "paired_t":
            a, b = self.pairs[:, 0], self.pairs[:, 1]
            return float(np.mean(np.where(w[a], y[a] - y[b], y[b] - y[a])))
        if self.name == "regression_t":
            Wr = self._resid(w[None, :].astype(float))[0]
            return float(Wr @ self._resid(y[None, :])[0] / (Wr @ Wr))
        if self.name == "bayes_t":
            return float(analytic_moments(y, w[None, :], self.Z)[0][0])
        return float(y[w].mean() - y[~w].mean())


@dataclass
class FisherResult:
    p_value: float
    observed: float
    null_draws: np.ndarray
    draws: int
    acceptance_rate: float | None = None


class RandomizationTest:
    """A statistic plus a fixed set of assignment draws, reusable across tau."""

    def __init__(
        self,
        ad: AnalysisDataset,
        scheme: RandomizationScheme,
        statistic: str,
        exact: bool = False,
        threads: int = 1,
        covariates: Sequence[str] = REGRESSION_COVARIATES,
    ):
        if statistic == "paired_t" and scheme.kind != "E":
            raise ConfigurationError("paired_t requires the paired experiment (E)")
        self.ad = ad
        self.scheme = scheme
        self.exact = exact
        self.evaluate = StatisticEvaluator(
            ad, statistic, BAYES_COVARIATES if statistic == "bayes_t" else covariates
        )
        self.w_obs = ad.treatment.astype(np.int8)
        self.acceptance_rate = None
        if exact:
            self.A = enumerate_assignments(scheme)
        else:
            counter: dict = {}
            self.A = run_blocks(
                lambda rng, size: draw_assignments(scheme, rng, size, counter),
                scheme.draws, scheme.seed, f"assign:{scheme.kind}", threads,
            ).astype(np.int8)
            if counter:
                self.acceptance_rate = counter["accepted"] / counter["tries"]
        self._tol = 1e-9

    def run(self, tau0: float = 0.0) -> FisherResult:
        y0 = self.ad.outcome - tau0 * self.w_obs
        obs = float(self.evaluate(y0, self.w_obs[None, :])[0])
        null = self.evaluate(y0, self.A)
        thresh = abs(obs) - self._tol * max(1.0, abs(obs)) if np.isfinite(obs) else np.inf
        hits = int(np.sum(np.abs(null) >= thresh))
        if self.exact:
            p = hits / len(null)
        else:
            p = (1 + hits) / (1 + len(null))
        return FisherResult(float(p), obs, null, len(null), self.acceptance_rate)

    def p_value(self, tau0: float) -> float:
        return self.run(tau0).p_value


def fisher_test(
    ad: AnalysisDataset,
    scheme: RandomizationScheme,
    statistic: str,
    tau0: float = 0.0,
    exact: bool = False,
    threads: int = 1,
) -> FisherResult:
    """Randomization p-value of the sharp null of a constant additive effect tau0.

    Monte-Carlo p-values use the add-one form (1 + hits) / (1 + draws);
    ``exact=True`` enumerates every assignment instead.
    """
    return RandomizationTest(ad, scheme, statistic, exact, threads).run(tau0)


@dataclass
class FiducialInterval:
    lower: float
    upper: float
    level: float
    disjoint: bool = False
    grid: np.ndarray | None = None
    p_curve: np.ndarray | None = None


def fiducial_interval(
    test: RandomizationTest,
    level: float = 0.95,
    grid: tuple[float, float, float] = (-1.0, 0.5, 0.01),
    bisections: int = 20,
) -> FiducialInterval:
    """Set of constant effects not rejected at 1 - level, by grid scan and bisection.

    The same assignment draws serve every tau (common random numbers). If the
    accepted grid points are not contiguous a warning is issued and the hull
    returned. A grid edge inside the accepted region extends the grid.
    """
    alpha = 1 - level
    accept = lambda t: test.p_value(t) >= alpha  # noqa: E731
    lo, hi, step = grid
    taus = lo + step * np.arange(int(round((hi - lo) / step)) + 1)
    pvals = np.array([test.p_value(t) for t in taus])
    for _ in range(20):
        ok = pvals >= alpha
        if ok.any() and not ok[0] and not ok[-1]:
            break
        if len(taus) > MAX_GRID:
            break
        span = taus[-1] - taus[0]
        extra_lo = taus[0] - step * np.arange(int(round(span / step)), 0, -1) if (ok[0] or not ok.any()) else np.empty(0)
        extra_hi = taus[-1] + step * np.arange(1, int(round(span / step)) + 1) if (ok[-1] or not ok.any()) else np.empty(0)
        taus = np.concatenate([extra_lo, taus, extra_hi])
        pvals = np.concatenate([[test.p_value(t) for t in extra_lo], pvals, [test.p_value(t) for t in extra_hi]])
        if not ok.any() and not (pvals >= alpha).any():
            est = test.evaluate.estimate(test.ad.outcome, test.w_obs.astype(bool))
            if accept(est) and est not in taus:
                pos = int(np.searchsorted(taus, est))
                taus = np.insert(taus, pos, est)
                pvals = np.insert(pvals, pos, test.p_value(est))
    ok = pvals >= alpha
    if not ok.any():
        warnings.warn("no effect value was accepted; Fiducial interval is empty", RuntimeWarning)
        return FiducialInterval(math.nan, math.nan, level, grid=taus, p_curve=pvals)
    idx = np.flatnonzero(ok)
    disjoint = bool(np.any(np.diff(idx) > 1))
    if disjoint:
        warnings.warn("accepted effects form a disjoint set; returning its hull", RuntimeWarning)

    def refine(inside: float, outside: float) -> float:
        for _ in range(bisections):
            mid = 0.5 * (inside + outside)
            if accept(mid):
                inside = mid
            else:
                outside = mid
        return inside

    lower = refine(taus[idx[0]], taus[idx[0] - 1]) if idx[0] > 0 else taus[idx[0]]
    upper = refine(taus[idx[-1]], taus[idx[-1] + 1]) if idx[-1] < len(taus) - 1 else taus[idx[-1]]
    return FiducialInterval(float(lower), float(upper), level, disjoint, taus, pvals)


def fisher_inference(
    ad: AnalysisDataset,
    kind: str,
    statistic: str,
    draws: int = 10_000,
    seed: int = 0,
    fiducial: bool = False,
    level: float = 0.95,
    threads: int = 1,
) -> InferenceResult:
    """Fisher test of no effect, optionally with the inverted Fiducial interval."""
    scheme = RandomizationScheme.for_design(ad, kind, draws, seed)
    test = RandomizationTest(ad, scheme, statistic, threads=threads)
    res = test.run(0.0)
    est = test.evaluate.estimate(ad.outcome, ad.treatment.astype(bool))
    details = {"experiment": kind, "statistic_name": statistic}
    if res.acceptance_rate is not None:
        details["acceptance_rate"] = res.acceptance_rate
    interval = None
    if fiducial:
        fi = fiducial_interval(test, level)
        interval = (fi.lower, fi.upper)
        details["disjoint"] = fi.disjoint
    return InferenceResult(
        f"fisher:{kind}:{statistic}", len(ad), est, interval, "fiducial" if fiducial else "none", res.p_value, res.observed,
        draws, seed, details, res.null_draws,
    )
