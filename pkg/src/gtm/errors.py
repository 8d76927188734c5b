"""Exception hierarchy. The CLI maps these onto exit codes."""


class GtmError(Exception):
    """Base class for all package errors."""


class ConfigError(GtmError, ValueError):
    pass


class DataError(GtmError, ValueError):
    pass


class ParameterError(GtmError, ValueError):
    pass


class FitError(GtmError, RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class ModelFormatError(GtmError, ValueError):
    pass


class SamplingError(GtmError, RuntimeError):
    pass


class MetricError(GtmError, ValueError):
    pass
