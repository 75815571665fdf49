class AfgLabError(Exception):
    """Base class for every error raised by afg_lab."""


class InputError(AfgLabError, ValueError):
    pass


class ValidationError(AfgLabError, ValueError):
    pass


class ConfigurationError(ValidationError):
    pass


class DegenerateError(AfgLabError, ValueError):
    pass


class FormatError(AfgLabError):
    pass


class IntegrityError(FormatError):
    pass


class TrainingError(AfgLabError, RuntimeError):
    pass


class AttackError(AfgLabError, RuntimeError):
    pass


class OptimizationError(AfgLabError, RuntimeError):
    pass


class DependencyError(AfgLabError):
    """A pipeline stage ran before the artifact it consumes existed."""
