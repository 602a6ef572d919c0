class StarkcalError(Exception):
    """Base class for package errors."""


class DeviceFormatError(StarkcalError, ValueError):
    """Device file could not be parsed."""


class DeviceValidationError(StarkcalError, ValueError):
    """A device invariant is violated. ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class SequenceError(StarkcalError, ValueError):
    pass


class StepSizeError(StarkcalError, ValueError):
    """Integration step too coarse for the fastest tone."""


class RWAError(StarkcalError, ValueError):
    """A tone lies too far from the qubit for the rotating-wave approximation."""


class ResonantDetuningError(StarkcalError, ValueError):
    """Zero detuning passed to a Stark-shift formula."""


class FitError(StarkcalError, RuntimeError):
    pass


class ConvergenceError(FitError):
    pass


class MissingCalibrationError(StarkcalError, KeyError):
    pass
