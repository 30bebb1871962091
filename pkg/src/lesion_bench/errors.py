"""
Error types raised by lesion-bench.

Every error carries a ``code`` (printed as the second field of a stderr
diagnostic line) and the process ``exit_code`` the CLI should use.
Input-validation failures derive from ``ValidationError`` and exit with 2.
"""

from pathlib import Path
from typing import Iterable


class LesionBenchError(Exception):
    code = "InternalError"
    exit_code = 1


class ValidationError(LesionBenchError, ValueError):
    code = "ValidationError"
    exit_code = 2

    def __init__(
        self,
        message: str,
        path: Path | str | None = None,
        row: int | None = None,
        column: str | None = None,
    ):
        self.message = message
        self.path = path
        self.row = row
        self.column = column
        super().__init__(self.__str__())

    def __str__(self) -> str:
        location = []
        if self.path is not None:
            location.append(str(self.path))
        if self.row is not None:
            location.append(f"row {self.row}")
        if self.column is not None:
            location.append(f"column {self.column}")

        if location:
            return f"{', '.join(location)}: {self.message}"
        return self.message


class _IdListError(ValidationError):
    """An error about a collection of image ids, listed in the message."""

    def __init__(self, message: str, ids: Iterable[str], path: Path | str | None = None):
        self.ids = sorted(ids)
        shown = ", ".join(self.ids[:20])
        if len(self.ids) > 20:
            shown += f", ... ({len(self.ids) - 20} more)"
        super().__init__(f"{message}: {shown}", path=path)


class DimensionMismatch(ValidationError):
    code = "DimensionMismatch"


class DomainError(ValidationError):
    code = "DomainError"


class InsufficientData(ValidationError):
    code = "InsufficientData"


class MissingPrediction(_IdListError):
    code = "MissingPrediction"


class InvalidProbability(ValidationError):
    code = "InvalidProbability"


class EmptyMatrix(ValidationError):
    code = "EmptyMatrix"


class DegenerateLabels(ValidationError):
    code = "DegenerateLabels"


class UnknownMetric(ValidationError):
    code = "UnknownMetric"


class DegenerateFit(ValidationError):
    code = "DegenerateFit"


class MissingPartitionScores(ValidationError):
    code = "MissingPartitionScores"


class ParseError(ValidationError):
    code = "ParseError"


class DuplicateImageId(ValidationError):
    code = "DuplicateImageId"


class MissingField(ValidationError):
    code = "MissingField"


class DecodeError(ValidationError):
    code = "DecodeError"


class UnsupportedFormat(ValidationError):
    code = "UnsupportedFormat"


class HeaderMismatch(ValidationError):
    code = "HeaderMismatch"


class ValueOutOfRange(ValidationError):
    code = "ValueOutOfRange"


class MissingRows(_IdListError):
    code = "MissingRows"


class ExtraRows(_IdListError):
    code = "ExtraRows"


class InvalidConfig(ValidationError):
    code = "InvalidConfig"
