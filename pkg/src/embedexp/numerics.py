"""Numerical kernels shared by the design and analysis stages.

All functions are pure; randomness comes in through an explicit
``numpy.random.Generator``. Streams are Philox (counter-based) generators
keyed by ``SeedSequence(seed, spawn_key=path)`` so a task identified by
``path`` draws the same numbers no matter which worker runs it.
"""

from __future__ import annotations

import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import (
    DivergenceError,
    DomainError,
    InfeasibleError,
    NestingError,
    SeparationError,
    SingularMatrixError,
)

COND_WARN = 1e8


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != len(self.labels):
            raise ValueError("design matrix shape does not match its labels")
        if not np.all(v[:, 0] == 1.0):
            raise ValueError("first design-matrix column must be the constant term")
        if not np.all(np.isfinite(v)):
            raise ValueError("design matrix has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_covariates(cls, cov: np.ndarray, labels: Sequence[str]) -> "DesignMatrix":
        cov = np.asarray(cov, dtype=float).reshape(len(cov), -1)
        return cls(np.column_stack([np.ones(len(cov)), cov]), ("const", *labels))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class FitResult:
    coef: np.ndarray
    cov: np.ndarray
    df: int
    labels: tuple[str, ...] = ()
    s2: float | None = None
    loglik: float | None = None
    n_iter: int = 0

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def fitted(self, X: DesignMatrix | np.ndarray) -> np.ndarray:
        return _values(X) @ self.coef


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    p_value: float
    df: int


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)


def _labels(X, p) -> tuple[str, ...]:
    return X.labels if isinstance(X, DesignMatrix) else tuple(f"x{j}" for j in range(p))


def _column_scale(X: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(X**2, axis=0))
    scale[scale == 0] = 1.0
    return scale


def _qr_checked(Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Q, R = np.linalg.qr(Xs)
    d = np.abs(np.diag(R))
    if d.size == 0 or d.min() <= 1e-10 * d.max():
        raise SingularMatrixError("design matrix is rank deficient")
    cond = np.linalg.cond(R)
    if cond > COND_WARN:
        warnings.warn(f"ill-conditioned design matrix (condition number {cond:.2e})", RuntimeWarning)
    return Q, R


def solve_ols(X: DesignMatrix | np.ndarray, y: np.ndarray) -> FitResult:
    """Least squares through a QR factorization of the column-equilibrated design."""
    Xv = _values(X)
    y = np.asarray(y, dtype=float)
    n, p = Xv.shape
    if len(y) != n:
        raise ValueError("y length does not match the design matrix")
    if n <= p:
        raise SingularMatrixError(f"need more units than parameters (n={n}, p={p})")
    scale = _column_scale(Xv)
    Q, R = _qr_checked(Xv / scale)
    coef_s = np.linalg.solve(R, Q.T @ y)
    coef = coef_s / scale
    resid = y - Xv @ coef
    df = n - p
    s2 = float(resid @ resid) / df
    Rinv = np.linalg.solve(R, np.eye(p))
    xtx_inv = (Rinv @ Rinv.T) / np.outer(scale, scale)
    return FitResult(coef, xtx_inv * s2, df, _labels(X, p), s2=s2)


def xtx_inverse(X: DesignMatrix | np.ndarray) -> np.ndarray:
    Xv = _values(X)
    scale = _column_scale(Xv)
    _, R = _qr_checked(Xv / scale)
    Rinv = np.linalg.solve(R, np.eye(Xv.shape[1]))
    return (Rinv @ Rinv.T) / np.outer(scale, scale)


def _bernoulli_loglik(w: np.ndarray, eta: np.ndarray) -> float:
    return float(np.sum(w * eta - np.logaddexp(0.0, eta)))


def logistic_newton(
    X: DesignMatrix | np.ndarray,
    w: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> FitResult:
    """Maximum-likelihood logistic regression by Newton-Raphson.

    Converges when the largest absolute score component falls below ``tol``.
    A Newton step that lowers the likelihood is halved until it does not.
    """
    Xv = _values(X)
    w = np.asarray(w, dtype=float)
    n, p = Xv.shape
    if set(np.unique(w)) != {0.0, 1.0}:
        raise DomainError("logistic fit needs both classes present in w")
    scale = _column_scale(Xv)
    Xs = Xv / scale
    _qr_checked(Xs)
    beta = np.zeros(p)
    beta[0] = np.log(w.mean() / (1 - w.mean())) * scale[0]
    eta = Xs @ beta
    ll = _bernoulli_loglik(w, eta)
    sign = 2 * w - 1
    for it in range(1, max_iter + 1):
        prob = 1.0 / (1.0 + np.exp(-eta))
        score_s = Xs.T @ (w - prob)
        if np.max(np.abs(score_s * scale)) < tol:
            return _logistic_result(X, Xs, scale, beta, prob, ll, n, p, it - 1)
        weights = prob * (1 - prob)
        info = Xs.T @ (Xs * weights[:, None])
        try:
            step = np.linalg.solve(info, score_s)
        except np.linalg.LinAlgError:
            raise SeparationError("information matrix became singular (separation)") from None
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            eta_c = Xs @ cand
            ll_c = _bernoulli_loglik(w, eta_c)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise DivergenceError("step halving failed to increase the likelihood")
        small_step = np.max(np.abs(t * step)) <= 1e-14 * max(1.0, np.max(np.abs(beta)))
        beta, eta, ll = cand, eta_c, ll_c
        if it >= 3 and np.max(np.abs(eta)) > 15 and np.all(sign * eta > 0):
            raise SeparationError("complete separation: fitted probabilities are 0/1")
        if np.max(np.abs(eta)) > 35:
            raise SeparationError("quasi-complete separation: coefficients diverging")
        if small_step:
            prob = 1.0 / (1.0 + np.exp(-eta))
            return _logistic_result(X, Xs, scale, beta, prob, ll, n, p, it)
    raise DivergenceError(f"logistic fit did not converge in {max_iter} iterations")


def _logistic_result(X, Xs, scale, beta_s, prob, ll, n, p, n_iter) -> FitResult:
    weights = prob * (1 - prob)
    info = Xs.T @ (Xs * weights[:, None])
    cov_s = np.linalg.inv(info)
    return FitResult(
        beta_s / scale, cov_s / np.outer(scale, scale), n - p, _labels(X, p), loglik=ll, n_iter=n_iter
    )


def logistic_probabilities(fit: FitResult, X: DesignMatrix | np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-(_values(X) @ fit.coef)))


def lrt_compare(full: FitResult, reduced: FitResult, df_diff: int) -> LrtResult:
    if df_diff < 1:
        raise DomainError("df_diff must be at least 1")
    stat = 2.0 * (full.loglik - reduced.loglik)
    if stat < -1e-8:
        raise NestingError(f"reduced model fits better than the full one (LR statistic {stat:.3g})")
    stat = max(stat, 0.0)
    return LrtResult(stat, float(stats.chi2.sf(stat, df_diff)), df_diff)


@dataclass(frozen=True)
class CovarianceMatrix:
    matrix: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
            raise DomainError("covariance matrix must be square and symmetric")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def estimate(cls, data: np.ndarray, labels: Sequence[str] = ()) -> "CovarianceMatrix":
        return cls(np.atleast_2d(np.cov(np.asarray(data, dtype=float), rowvar=False)), tuple(labels))

    def cholesky(self) -> np.ndarray:
        try:
            L = np.linalg.cholesky(self.matrix)
        except np.linalg.LinAlgError:
            raise SingularMatrixError("covariance matrix is not positive definite") from None
        d = np.diag(L)
        if d.min() <= 1e-10 * d.max():
            raise SingularMatrixError("covariance matrix is numerically singular")
        return L


def mahalanobis_sq(u: np.ndarray, v: np.ndarray, S: CovarianceMatrix) -> float:
    diff = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    if diff.shape != (S.matrix.shape[0],):
        raise ValueError("vector dimensions do not match the covariance matrix")
    z = np.linalg.solve(S.cholesky(), diff)
    return float(z @ z)


def mahalanobis_matrix(A: np.ndarray, B: np.ndarray, S: CovarianceMatrix) -> np.ndarray:
    """All pairwise squared distances between rows of ``A`` and rows of ``B``."""
    L = S.cholesky()
    za = np.linalg.solve(L, np.asarray(A, dtype=float).T).T
    zb = np.linalg.solve(L, np.asarray(B, dtype=float).T).T
    d = (za**2).sum(1)[:, None] + (zb**2).sum(1)[None, :] - 2 * za @ zb.T
    return np.maximum(d, 0.0)


@dataclass(frozen=True)
class Assignment:
    columns: np.ndarray  # column matched to each row
    total: float


def assignment_min_cost(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective map rows -> columns (rows <= columns).

    Shortest augmenting paths with dual potentials (Hungarian family),
    O(n^2 m) for an n x m matrix. Ties resolve toward lower column index.
    """
    a = np.asarray(cost, dtype=float)
    if a.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = a.shape
    if n > m:
        raise InfeasibleError(f"{n} rows cannot be matched injectively into {m} columns")
    if not np.all(np.isfinite(a)):
        raise DomainError("cost matrix has non-finite entries")
    if n == 0:
        return Assignment(np.empty(0, dtype=np.int64), 0.0)
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) owning column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return Assignment(cols, float(a[np.arange(n), cols].sum()))


def make_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Philox stream for task ``path`` under ``seed``."""
    key = tuple(zlib.crc32(x.encode()) if isinstance(x, str) else int(x) for x in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))


BLOCK = 1024


def run_blocks(
    fn: Callable[[np.random.Generator, int], np.ndarray],
    total: int,
    seed: int,
    tag: str,
    threads: int = 1,
) -> np.ndarray:
    """Evaluate ``fn(rng, size)`` over fixed-size blocks and stack the results.

    Block ``b`` always uses stream ``(seed, tag, b)``, so the output does not
    depend on ``threads``.
    """
    sizes = [min(BLOCK, total - s) for s in range(0, total, BLOCK)]
    jobs = [(make_rng(seed, tag, b), size) for b, size in enumerate(sizes)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda job: fn(*job), jobs))
    else:
        parts = [fn(*job) for job in jobs]
    if not parts:
        return np.empty(0)
    return np.concatenate(parts, axis=0)


def draw_scaled_inv_chisq(rng: np.random.Generator, df: float, scale: float, size=None):
    """sigma^2 with df * scale / sigma^2 ~ chi^2_df."""
    if not (df >= 1) or not (scale > 0) or not np.isfinite(scale):
        raise DomainError(f"invalid scaled inverse chi-square parameters df={df}, scale={scale}")
    return df * scale / rng.chisquare(df, size=size)


def draw_mvnormal(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray, size=None):
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    p = mean.shape[-1]
    if cov.shape != (p, p) or not np.allclose(cov, cov.T, atol=1e-12):
        raise DomainError("covariance must be a symmetric p x p matrix")
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-10 * max(1.0, abs(vals.max())):
            raise DomainError("covariance is not positive semi-definite") from None
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    shape = (p,) if size is None else (*np.atleast_1d(size), p)
    z = rng.standard_normal(shape)
    return mean + z @ factor.T
