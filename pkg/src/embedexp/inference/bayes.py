"""Finite-population posterior of the average causal effect by imputation.

Each arm gets its own normal linear model in the covariates with the flat
prior p(beta, sigma^2) ~ 1/sigma^2. A posterior draw of the ACE samples
sigma^2 and beta for both arms, imputes every unit's missing potential
outcome from the opposite arm's model, and averages Y(1) - Y(0) over all
units.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..dataset import AnalysisDataset
from ..errors import DomainError, SingularMatrixError, UndefinedStatisticError
from ..numerics import (
    DesignMatrix,
    draw_mvnormal,
    draw_scaled_inv_chisq,
    run_blocks,
    solve_ols,
    xtx_inverse,
)
from .results import AcePosterior

BAYES_COVARIATES = ("age", "height", "sex")


class _Arm:
    """Posterior ingredients of one arm's regression."""

    def __init__(self, Z: np.ndarray, y: np.ndarray, labels):
        X = DesignMatrix.from_covariates(Z, labels)
        n, p = X.shape
        if n - p < 2:
            raise DomainError(f"arm with {n} units leaves {n - p} residual df; need at least 2")
        fit = solve_ols(X, y)
        self.coef = fit.coef
        self.df = fit.df
        self.s2 = fit.s2
        self.xtx_inv = xtx_inverse(X)


def _arm_design(ad: AnalysisDataset, covariates: Sequence[str]) -> np.ndarray:
    return ad.covariates(covariates)


def ace_posterior(
    ad: AnalysisDataset,
    draws: int = 10_000,
    seed: int = 0,
    covariates: Sequence[str] = BAYES_COVARIATES,
    assignment: np.ndarray | None = None,
    outcome: np.ndarray | None = None,
    threads: int = 1,
) -> AcePosterior:
    """Draw the ACE posterior.

    ``assignment``/``outcome`` override the dataset's realized treatment and
    observed outcomes, which lets randomization tests evaluate the statistic
    under a redrawn assignment.
    """
    w = (ad.treatment if assignment is None else np.asarray(assignment)).astype(bool)
    y = ad.outcome if outcome is None else np.asarray(outcome, dtype=float)
    Z = _arm_design(ad, covariates)
    arm_t = _Arm(Z[w], y[w], covariates)
    arm_c = _Arm(Z[~w], y[~w], covariates)
    if arm_t.s2 == 0 or arm_c.s2 == 0:
        raise UndefinedStatisticError("an arm fits its outcomes exactly; posterior is degenerate")
    Xt_imp = np.column_stack([np.ones((~w).sum()), Z[~w]])  # controls need Y(1)
    Xc_imp = np.column_stack([np.ones(w.sum()), Z[w]])  # treated need Y(0)
    base = y[w].sum() - y[~w].sum()
    N = len(y)
    p = Xt_imp.shape[1]

    def block(rng: np.random.Generator, size: int) -> np.ndarray:
        sums = []
        for arm, Xi in ((arm_t, Xt_imp), (arm_c, Xc_imp)):
            sig2 = draw_scaled_inv_chisq(rng, arm.df, arm.s2, size=size)
            z = draw_mvnormal(rng, np.zeros(p), arm.xtx_inv, size=size)
            beta = arm.coef + np.sqrt(sig2)[:, None] * z
            mu = beta @ Xi.T
            y_mis = mu + np.sqrt(sig2)[:, None] * rng.standard_normal(mu.shape)
            sums.append(y_mis.sum(axis=1))
        return (base + sums[0] - sums[1]) / N

    return AcePosterior.from_draws(run_blocks(block, draws, seed, "ace_posterior", threads))


def posterior_t(post: AcePosterior) -> float:
    """|posterior mean| / posterior SD."""
    if post.sd == 0:
        raise UndefinedStatisticError("posterior SD is zero")
    return abs(post.mean) / post.sd


def analytic_moments(
    y: np.ndarray, A: np.ndarray, Z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form posterior mean and variance of the ACE for each row of ``A``.

    With the flat prior, beta given the arm's data is multivariate t and
    sigma^2 has mean RSS/(df - 2). For the sum of a block's imputed outcomes
    ``S = a'beta + noise`` this gives E[S] = a'beta_hat and
    Var[S] = RSS/(df - 2) * (a' (X'X)^-1 a + count).

    Args:
        y: outcomes (n,).
        A: assignments (B, n), 1 = treated.
        Z: covariates without intercept (n, q).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.asarray(y, dtype=float)
    n = len(y)
    # intercept models are invariant to affine covariate re-expression
    Zs = Z - Z.mean(axis=0) if Z.shape[1] else Z
    if Zs.shape[1]:
        sc = Zs.std(axis=0)
        sc[sc == 0] = 1.0
        Zs = Zs / sc
    ys = y - y.mean()
    X = np.column_stack([np.ones(n), Zs])
    p = X.shape[1]
    outer = (X[:, :, None] * X[:, None, :]).reshape(n, p * p)
    G_all = outer.sum(axis=0).reshape(p, p)
    b_all = X.T @ ys
    yy_all = ys @ ys
    col_all = X.sum(axis=0)

    n_t = A.sum(axis=1)
    n_c = n - n_t
    if np.any(n_t - p <= 2) or np.any(n_c - p <= 2):
        raise DomainError("analytic posterior variance needs more than p + 2 units per arm")
    G_t = (A @ outer).reshape(-1, p, p)
    G_c = G_all - G_t
    b_t = A @ (X * ys[:, None])
    b_c = b_all - b_t
    yy_t = A @ ys**2
    yy_c = yy_all - yy_t
    col_t = A @ X
    col_c = col_all - col_t
    try:
        beta_t = np.linalg.solve(G_t, b_t[..., None])[..., 0]
        beta_c = np.linalg.solve(G_c, b_c[..., None])[..., 0]
        q_t = np.einsum("bi,bi->b", col_c, np.linalg.solve(G_t, col_c[..., None])[..., 0])
        q_c = np.einsum("bi,bi->b", col_t, np.linalg.solve(G_c, col_t[..., None])[..., 0])
    except np.linalg.LinAlgError:
        raise SingularMatrixError("an arm's X'X is singular") from None
    rss_t = np.maximum(yy_t - np.einsum("bi,bi->b", beta_t, b_t), 0.0)
    rss_c = np.maximum(yy_c - np.einsum("bi,bi->b", beta_c, b_c), 0.0)
    sum_t = A @ ys
    sum_c = ys.sum() - sum_t
    mean = (sum_t - sum_c + np.einsum("bi,bi->b", col_c, beta_t) - np.einsum("bi,bi->b", col_t, beta_c)) / n
    var = (rss_t / (n_t - p - 2) * (q_t + n_c) + rss_c / (n_c - p - 2) * (q_c + n_t)) / n**2
    return mean, var


def bayes_t_statistic(
    ad: AnalysisDataset,
    assignment: np.ndarray | None = None,
    outcome: np.ndarray | None = None,
    fast: bool = True,
    draws: int = 2_000,
    seed: int = 0,
    covariates: Sequence[str] = BAYES_COVARIATES,
) -> float:
    """|posterior mean| / posterior SD of the ACE, analytic or by sampling."""
    w = ad.treatment if assignment is None else np.asarray(assignment)
    y = ad.outcome if outcome is None else np.asarray(outcome, dtype=float)
    if fast:
        mean, var = analytic_moments(y, w[None, :], ad.covariates(covariates))
        if var[0] <= 0:
            raise UndefinedStatisticError("posterior SD is zero")
        return float(abs(mean[0]) / np.sqrt(var[0]))
    return posterior_t(ace_posterior(ad, draws, seed, covariates, w, y))
