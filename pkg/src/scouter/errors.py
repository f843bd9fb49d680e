"""Exception types shared across the package."""


class ScouterError(Exception):
    """Base class for all package errors."""


class DimensionError(ScouterError, ValueError):
    pass


class ConfigError(ScouterError, ValueError):
    pass


class UsageError(ScouterError, RuntimeError):
    pass


class FormatError(ScouterError, ValueError):
    pass


class ConsistencyError(ScouterError, ValueError):
    pass


class ValidationError(ScouterError, ValueError):
    pass


class CorruptionError(ScouterError, ValueError):
    pass


class UpgradeError(ScouterError, ValueError):
    """Checkpoint written by an incompatible format version."""


class UndefinedMetricError(ScouterError, ArithmeticError):
    """A metric has no defined value for this input (e.g. zero-mass heatmap)."""


class PrerequisiteError(ScouterError, ValueError):
    """A metric was requested without the annotation it needs."""


class NonFiniteError(ScouterError, FloatingPointError):
    pass
