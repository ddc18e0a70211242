"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array or tensor dimensions are inconsistent with an operation's contract."""


class InsufficientSourceError(ValueError):
    """Source image is too small for the requested crop."""


class EmptyDatasetError(ValueError):
    pass


class ScheduleError(ValueError):
    """Invalid diffusion variance schedule."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, truncated, incomplete, or of a foreign version."""


class NumericalError(RuntimeError):
    """A loss became non-finite during training."""

    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path
