"""Super-population estimators: Welch comparison and covariate-adjusted OLS."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import stats

from ..dataset import AnalysisDataset
from ..errors import UndefinedStatisticError
from ..numerics import DesignMatrix, solve_ols
from .results import InferenceResult

ADJUST_COVARIATES = ("age", "height", "sex")


def neyman_crude(ad: AnalysisDataset, level: float = 0.95) -> InferenceResult:
    """Difference in group means with Welch standard error and
    Welch-Satterthwaite degrees of freedom."""
    y, w = ad.outcome, ad.treatment == 1
    yt, yc = y[w], y[~w]
    if len(yt) < 2 or len(yc) < 2:
        raise UndefinedStatisticError("each group needs at least two units for a variance")
    est = float(yt.mean() - yc.mean())
    vt, vc = yt.var(ddof=1) / len(yt), yc.var(ddof=1) / len(yc)
    se = math.sqrt(vt + vc)
    if se == 0:
        return InferenceResult(
            "crude", len(y), est, (est, est), p_value=1.0 if est == 0 else 0.0,
            details={"se": 0.0, "degenerate": True},
        )
    df = (vt + vc) ** 2 / (vt**2 / (len(yt) - 1) + vc**2 / (len(yc) - 1))
    q = stats.t.ppf(0.5 + level / 2, df)
    t = est / se
    return InferenceResult(
        "crude", len(y), est, (est - q * se, est + q * se),
        p_value=float(2 * stats.t.sf(abs(t), df)), statistic=t,
        details={"se": se, "df": df},
    )


def _coef_test(X: DesignMatrix, y: np.ndarray, k: int, level: float):
    fit = solve_ols(X, y)
    est = float(fit.coef[k])
    se = float(math.sqrt(max(fit.cov[k, k], 0.0)))
    q = stats.t.ppf(0.5 + level / 2, fit.df)
    if se == 0:
        p = 1.0 if est == 0 else 0.0
        t = 0.0 if est == 0 else math.copysign(math.inf, est)
    else:
        t = est / se
        p = float(2 * stats.t.sf(abs(t), fit.df))
    return est, se, q, t, p, fit.df


def ols_adjusted(
    ad: AnalysisDataset, covariates: Sequence[str] = ADJUST_COVARIATES, level: float = 0.95
) -> InferenceResult:
    """Treatment coefficient in outcome ~ 1 + treatment + covariates."""
    X = DesignMatrix.from_covariates(
        np.column_stack([ad.treatment, ad.covariates(covariates)]), ("treatment", *covariates)
    )
    est, se, q, t, p, df = _coef_test(X, ad.outcome, 1, level)
    return InferenceResult(
        "adjusted", len(ad), est, (est - q * se, est + q * se), p_value=p, statistic=t,
        details={"se": se, "df": df, "covariates": list(covariates)},
    )


def interaction_screen(
    ad: AnalysisDataset, covariates: Sequence[str] = ADJUST_COVARIATES
) -> dict[str, float]:
    """p-value of each treatment-by-covariate interaction, added one at a time
    to the adjusted model."""
    w = ad.treatment.astype(float)
    Z = ad.covariates(covariates)
    out = {}
    for k, name in enumerate(covariates):
        X = DesignMatrix.from_covariates(
            np.column_stack([w, Z, w * Z[:, k]]), ("treatment", *covariates, f"treatment*{name}")
        )
        out[f"treatment*{name}"] = _coef_test(X, ad.outcome, X.shape[1] - 1, 0.95)[4]
    return out
