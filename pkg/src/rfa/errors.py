class RFAError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(RFAError, ValueError):
    """Invalid dimensions, shapes, or hyperparameters."""


class DegenerateInputError(RFAError, ValueError):
    """Input for which the operation is undefined (e.g. a zero-norm vector)."""


class UnsupportedKindError(ParameterError):
    """Operation requested for a feature-map or kernel kind that does not support it."""


class RangeError(RFAError, OverflowError):
    """Intermediate value would overflow 64-bit floats."""


class TrainingDivergedError(RFAError, FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss
