"""
错误类型 - 工作台各阶段抛出的异常

All errors derive from WorkbenchError and also from the closest builtin, so callers
can catch either ``WorkbenchError`` or e.g. ``ValueError``.
"""

from typing import Any, Optional


class WorkbenchError(Exception):
    """Base class for every error raised by dfr_workbench."""


class SpecificationError(WorkbenchError, ValueError):
    """A dataset spec or config value violates its invariants."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ArgumentError(WorkbenchError, ValueError):
    """An operation argument is out of range."""


class ShapeError(WorkbenchError, ValueError):
    """Array dimensions do not match what the operation expects."""

    def __init__(self, what: str, expected: Any, actual: Any):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class DivergenceError(WorkbenchError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


class BalanceError(WorkbenchError, ValueError):
    """A group needed for balanced sampling is empty."""

    def __init__(self, group: int, message: str = "group is empty"):
        self.group = group
        super().__init__(f"group {group}: {message}")


class LabelError(WorkbenchError, ValueError):
    """Retraining input does not contain both labels."""


class MetricError(WorkbenchError, ValueError):
    """A group has no samples to compute a metric on."""

    def __init__(self, group: int):
        self.group = group
        super().__init__(f"group {group} has no samples in the evaluated split")


class ProbeError(WorkbenchError, ValueError):
    """The probe set cannot support neuron scoring."""


class NeuronIndexError(WorkbenchError, IndexError):
    """Neuron (channel) index out of range."""


class FormatError(WorkbenchError, ValueError):
    """A persisted file does not follow its declared format."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"at byte offset {offset}: {message}")


class ExportError(WorkbenchError, OSError):
    """Writing an exported artifact failed."""


class PipelineStageError(WorkbenchError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Optional[BaseException] = None, run: Optional[int] = None):
        self.stage = stage
        self.cause = cause
        self.run = run
        where = f"run {run}, " if run is not None else ""
        super().__init__(f"stage '{stage}' failed ({where}{type(cause).__name__ if cause else 'error'}): {cause}")
