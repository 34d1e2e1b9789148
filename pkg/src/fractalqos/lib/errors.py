class FractalQosError(Exception):
    pass


class TraceError(FractalQosError, ValueError):
    """Invalid trace, generator spec or estimator argument."""


class DegenerateInputError(FractalQosError, ValueError):
    """The estimator cannot fit a scaling law to the input."""


class SchedulingError(FractalQosError):
    pass


class ReleaseError(FractalQosError):
    """A flow holding was released twice."""


class SaturationError(FractalQosError):
    """The calibration table has no finite buffer for the query."""


class LedgerError(FractalQosError):
    pass


class JobInterrupted(FractalQosError):
    pass


class ConfigError(FractalQosError, ValueError):

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message
