"""Exception types shared across the package, mapped to CLI exit codes."""


class EndoDACError(Exception):
    """Base class for all package errors."""


class ConfigError(EndoDACError):
    """Invalid configuration value, unknown key, or inconsistent model spec. Exit code 2."""


class DimensionError(EndoDACError, ValueError):
    """Tensor shapes inconsistent with the declared contract."""


class EvaluationError(EndoDACError):
    """Evaluation preconditions violated (empty mask, too few frames, zero ground truth)."""


class NumericAbort(EndoDACError, ArithmeticError):
    """Non-finite value encountered where the trainer guarantees finiteness. Exit code 4."""


class CheckpointVersionError(ConfigError):
    """Checkpoint archive is from an incompatible format version."""
