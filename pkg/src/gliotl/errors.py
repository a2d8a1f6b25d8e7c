"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class DegenerateInputError(ValueError):
    """Input is well-formed but carries no usable signal (e.g. zero variance)."""


class UndefinedMetricError(ValueError):
    """A metric is mathematically undefined for the given input."""


class StageError(RuntimeError):
    def __init__(self, kind: str, message: str, diagnostics: str = ""):
        super().__init__(f"stage {kind} failed: {message}")
        self.kind = kind
        self.diagnostics = diagnostics


class TrainingDivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class LeakageError(AssertionError):
    """A held-out record was touched where it must not be."""


class GridExhausted(Exception):
    """The grid sampler has no unvisited configuration left."""


class TrialPruned(Exception):
    """Raised inside an objective when the pruner stops a trial."""
