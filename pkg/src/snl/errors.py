"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class UsageError(ValueError):
    """An operation was called with inputs that violate its contract."""


class UndefinedMetricError(ValueError):
    """A metric cannot be computed, e.g. AUROC on single-class labels."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss (CLI exit code 3)."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
