"""Exception types raised across cogplan."""


class CogplanError(Exception):
    pass


class InputError(CogplanError, ValueError):
    """Malformed or out-of-range input data."""


class ConfigError(CogplanError, ValueError):
    """Inconsistent configuration, missing checkpoint or architecture mismatch."""


class UsageError(CogplanError, RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar."""


class GenerationError(CogplanError, RuntimeError):
    """Synthetic data generator exhausted its retries."""


class TrainingDivergedError(CogplanError, RuntimeError):
    """Loss became non-finite during training."""
