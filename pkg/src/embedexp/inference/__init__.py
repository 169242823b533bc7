"""Analysis-stage estimators on an unsealed, locked design."""

from .bayes import ace_posterior, analytic_moments, bayes_t_statistic, posterior_t
from .estimators import interaction_screen, neyman_crude, ols_adjusted
from .randomization import (
    STATISTICS,
    FiducialInterval,
    FisherResult,
    RandomizationScheme,
    RandomizationTest,
    draw_assignments,
    enumerate_assignments,
    fiducial_interval,
    fisher_inference,
    fisher_test,
    redraw_assignment,
)
from .results import AcePosterior, InferenceResult

__all__ = [
    "STATISTICS",
    "AcePosterior",
    "FiducialInterval",
    "FisherResult",
    "InferenceResult",
    "RandomizationScheme",
    "RandomizationTest",
    "ace_posterior",
    "analytic_moments",
    "bayes_t_statistic",
    "draw_assignments",
    "enumerate_assignments",
    "fiducial_interval",
    "fisher_inference",
    "fisher_test",
    "interaction_screen",
    "neyman_crude",
    "ols_adjusted",
    "posterior_t",
    "redraw_assignment",
]
