"""Exception types raised across the package."""


class SmetodError(Exception):
    pass


class DimensionError(SmetodError, ValueError):
    pass


class DegenerateSliceError(SmetodError, ValueError):
    """A softmax slice had no unmasked entry."""


class ArityError(SmetodError, ValueError):
    pass


class DeterminismError(SmetodError, RuntimeError):
    pass


class LengthError(SmetodError, ValueError):
    pass


class DegenerateTargetError(SmetodError, ValueError):
    """Every target position was padding."""


class FormatError(SmetodError, ValueError):
    pass


class CorpusError(SmetodError, ValueError):
    pass


class SpecError(SmetodError, ValueError):
    pass


class CheckpointError(SmetodError, ValueError):
    pass


class TrainingDivergedError(SmetodError, RuntimeError):
    def __init__(self, step: int, lr: float, grad_norm: float, loss: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at step {step} (lr={lr:g}, grad_norm={grad_norm:g})"
        )


class BenchError(SmetodError, RuntimeError):
    pass
