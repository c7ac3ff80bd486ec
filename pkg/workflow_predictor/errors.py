"""Exception hierarchy shared by every module.

Each error class carries the process exit code the CLI reports for it.
"""

from typing import Iterable, List, Optional, Sequence


class WorkflowPredictorError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1


class ConfigError(WorkflowPredictorError):
    """A configuration value is missing, malformed or inconsistent."""

    exit_code = 2


class DataIoError(WorkflowPredictorError):
    """An input or output file could not be read or written."""

    exit_code = 3


class DataValidationError(WorkflowPredictorError, ValueError):
    """Input data violates a documented invariant."""

    exit_code = 4


class NumericError(WorkflowPredictorError):
    """A numeric kernel received bad shapes or produced non-finite values."""

    exit_code = 5


class ShapeMismatch(NumericError):
    """Operand shapes are incompatible."""


class FormatError(DataValidationError):
    """A record in a line-oriented file could not be parsed."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ScriptSyntaxError(DataValidationError):
    """A workflow script does not match the statement grammar."""

    def __init__(self, line: int, column: int, message: str):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class UnboundVariable(DataValidationError):
    """A workflow script consumes a variable no earlier statement bound."""

    def __init__(self, name: str, line: Optional[int] = None):
        self.name = name
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unbound variable {name!r}{where}")


class UnknownNode(DataValidationError, KeyError):
    """A node id does not exist in the graph."""

    def __init__(self, node_id: int):
        self.node_id = node_id
        super().__init__(f"unknown node {node_id}")

    def __str__(self) -> str:
        return self.args[0]


class CyclicGraph(DataValidationError):
    """A graph that must be acyclic contains a directed cycle."""

    def __init__(self, cycle: Sequence[int], graph_id: str = ""):
        self.cycle = list(cycle)
        label = f" in graph {graph_id!r}" if graph_id else ""
        super().__init__(f"directed cycle{label}: {self.cycle}")


class EmbeddingMiss(DataValidationError, KeyError):
    """File-mode encoder has no vector for the requested text."""

    def __init__(self, text: str):
        self.text = text
        super().__init__(f"no embedding for text {text[:60]!r}")

    def __str__(self) -> str:
        return self.args[0]


class UnresolvedId(DataValidationError):
    """Label records reference workflows or tasks that were not loaded."""

    def __init__(self, unresolved: Iterable[str], lines: Iterable[int]):
        self.unresolved: List[str] = sorted(set(unresolved))
        self.lines: List[int] = sorted(set(lines))
        shown = ", ".join(self.unresolved[:5])
        super().__init__(f"unresolved ids [{shown}] on lines {self.lines[:10]}")


class EmptySplit(DataValidationError):
    """A training or validation split is empty."""


class TooFewSamples(DataValidationError):
    """Not enough samples to build a split."""


class EmptyTaskSet(DataValidationError):
    """A success rate was requested over zero tasks."""


class EmptyProbeSet(DataValidationError):
    """Task filtering was requested with no probe workflows."""


class LengthMismatch(DataValidationError):
    """Paired sequences differ in length."""


class EmptyInput(DataValidationError):
    """A metric was requested over an empty sequence."""


class KOutOfRange(DataValidationError):
    """Top-k size is outside [1, number of workflows]."""


class MissingWorkflow(DataValidationError):
    """A workflow has no samples on one side of a ranking comparison."""


class NoApplicableMove(DataValidationError):
    """No mutation can be applied to the graph."""
