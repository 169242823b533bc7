"""Exception hierarchy.

Each family carries the process exit code the CLI maps it to, so library
callers and the command line agree on what kind of failure occurred.
"""


class EmbedExpError(Exception):
    exit_code = 1


class UsageError(EmbedExpError):
    """Invalid configuration or incompatible options."""

    exit_code = 2


class ConfigurationError(UsageError):
    pass


class DataError(EmbedExpError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class EmptyDesignError(DataError):
    """A design step discarded every unit of at least one group."""


class NumericError(EmbedExpError):
    exit_code = 4


class SingularMatrixError(NumericError):
    pass


class DivergenceError(NumericError):
    pass


class SeparationError(NumericError):
    pass


class NestingError(NumericError):
    pass


class DomainError(NumericError, ValueError):
    pass


class InfeasibleError(NumericError):
    pass


class UndefinedStatisticError(NumericError):
    """A statistic has no finite value, e.g. an SMD with zero pooled SD."""


class CriterionTooTightError(NumericError):
    pass


class BlindingViolationError(EmbedExpError):
    """Outcomes were requested without a lock matching the design."""

    exit_code = 5


class TamperError(BlindingViolationError):
    pass


class NotApplicableError(EmbedExpError):
    pass
