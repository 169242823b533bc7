"""Design-before-analysis causal inference for observational studies.

Outcomes stay sealed while a design is built and its balance assessed; they
open only for a design frozen under a content-hash lock.
"""

from .dataset import (
    AnalysisDataset,
    BlindedDataset,
    DesignLock,
    load_csv,
    summarize,
    unseal_outcomes,
)
from .design import (
    AcceptanceCriterion,
    DesignResult,
    caliper_match,
    coarsened_stratify,
    design_none,
    discard_nonoverlap,
    fit_propensity,
    freeze,
    optimal_match,
    trim_by_ranges,
)
from .errors import EmbedExpError

__version__ = "0.1.0"

__all__ = [
    "AcceptanceCriterion",
    "AnalysisDataset",
    "BlindedDataset",
    "DesignLock",
    "DesignResult",
    "EmbedExpError",
    "caliper_match",
    "coarsened_stratify",
    "design_none",
    "discard_nonoverlap",
    "fit_propensity",
    "freeze",
    "load_csv",
    "optimal_match",
    "summarize",
    "trim_by_ranges",
    "unseal_outcomes",
]
