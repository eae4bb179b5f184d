"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Incompatible dimensions, unknown encoder specs, bad config values."""


class FormatError(ValueError):
    """Malformed category files, annotation files, or checkpoints."""


class NumericsError(RuntimeError):
    """NaN/Inf detected where finite values are required."""


class EvaluationError(ValueError):
    """Inconsistent prediction/annotation inputs to the evaluator."""
