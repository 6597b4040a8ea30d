"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all histoseg errors."""


class InvalidInput(PipelineError):
    """An argument violates an operation's precondition."""


class FormatError(PipelineError):
    """A serialized artifact is malformed.

    ``offset`` is the byte position in the file where the problem was
    detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyPopulation(PipelineError):
    """A sampling tree was built over zero surviving patch records."""


class StreamIOError(PipelineError):
    """A batch-stream worker failed to read its inputs."""


class TrainingDiverged(PipelineError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class InferenceError(PipelineError):
    """The classifier failed on a grid cell."""

    def __init__(self, message: str, cell: tuple[int, int] | None = None):
        if cell is not None:
            message = f"{message} (grid cell x={cell[0]}, y={cell[1]})"
        super().__init__(message)
        self.cell = cell


class ExecutorError(PipelineError):
    """The external model executor crashed or violated the protocol."""


class DegenerateTrainingWarning(UserWarning):
    """Refiner training data contains a single class."""
