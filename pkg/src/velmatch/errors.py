"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions incompatible with the declared specification."""


class UnsupportedPrimitiveError(TypeError):
    """A derivative was requested through a primitive that has none."""


class DivergenceError(RuntimeError):
    """Integration or simulation produced a non-finite state.

    Carries the time at which the blow-up was detected.
    """

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class StiffnessError(RuntimeError):
    """Adaptive step size underflowed; the problem is likely stiff."""


class CapabilityError(RuntimeError):
    """The flow model cannot provide a quantity the caller asked for."""


class TuningError(RuntimeError):
    """A sampler or optimizer needs different tuning to make progress."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient.

    ``snapshot`` holds diagnostic values (iteration, times, loss terms).
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
