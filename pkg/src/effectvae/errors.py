"""Exception hierarchy shared across the package."""


class EffectVaeError(Exception):
    """Base class for all package errors."""


class DimensionError(EffectVaeError):
    """Tensor shapes are incompatible with the requested operation."""


class DomainError(EffectVaeError):
    """An input value lies outside the mathematical domain of an operation."""


class ContractError(EffectVaeError):
    """A caller violated a documented precondition."""


class NumericalError(EffectVaeError):
    """A computation produced or encountered a non-finite value."""


class ConfigurationError(EffectVaeError):
    """Invalid configuration or hyperparameter value."""


class DataError(EffectVaeError):
    """A dataset violates its schema or invariants."""


class ParseError(DataError):
    """A file could not be parsed."""


class SplitError(DataError):
    """A requested data split cannot be constructed."""


class MetricError(EffectVaeError):
    """A metric's preconditions are not met."""


class FitError(EffectVaeError):
    """A baseline model could not be fitted."""


class QueryError(EffectVaeError):
    """A prediction query violates the fitted model's preconditions."""


class GenerationError(EffectVaeError):
    """Synthetic data generation failed to meet its calibration target."""
