"""Exception types shared across the benchmark."""


class BenchmarkError(Exception):
    """Base class for all errors raised by iqadefbench."""


class ModelInputError(BenchmarkError, ValueError):
    """Image shape or contents unsupported by a model or operation."""


class CapabilityError(BenchmarkError):
    """A gradient (or training) was requested from a model that cannot provide it."""


class ConfigurationError(BenchmarkError, ValueError):
    """Invalid configuration. ``fields`` names the offending entries."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)


class AdapterError(BenchmarkError):
    """An external scoring or purification endpoint failed."""

    def __init__(self, message, diagnostics=""):
        super().__init__(message)
        self.diagnostics = diagnostics


class InsufficientSamplesError(BenchmarkError, ValueError):
    def __init__(self, message, minimum_n):
        super().__init__(message)
        self.minimum_n = minimum_n
