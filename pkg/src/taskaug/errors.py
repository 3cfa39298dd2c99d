"""Exception types raised across the package."""


class TaskAugError(Exception):
    """Base class for package errors."""


class DegenerateVolume(TaskAugError, ValueError):
    """Raised when a volume has no intensity spread to normalize against."""


class ShapeMismatch(TaskAugError, ValueError):
    pass


class InsufficientSubjects(TaskAugError, ValueError):
    pass


class EmptySplit(TaskAugError, ValueError):
    pass


class UnpairedRuns(TaskAugError, ValueError):
    pass


class NonFiniteLoss(TaskAugError, RuntimeError):
    """Raised when a training loss becomes NaN or infinite.

    ``dump_path`` points at the diagnostic archive written before aborting,
    if one could be written.
    """

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
