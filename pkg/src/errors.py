"""
Exception hierarchy for weakcat.
Library code raises these; the CLI maps them to process exit codes.
"""

from typing import Any, Dict, Optional


class WeakcatError(Exception):
    """Base class for all weakcat failures."""

    exit_code = 1


class DataError(WeakcatError):
    """Input data, artifact files or arguments violate a contract."""

    exit_code = 2


class NumericError(WeakcatError):
    """Numerical failure during optimization."""

    exit_code = 3


class EmptyCorpus(DataError):
    pass


class DegenerateSplit(DataError):
    pass


class CatalogFormatError(DataError):
    """A catalog line could not be parsed or violates record invariants."""

    def __init__(self, path: str, line_number: int, reason: str):
        self.path = path
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{path}:{line_number}: {reason}")


class DimensionMismatch(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


class EmptyIndex(DataError):
    pass


class EmptyQuerySet(DataError):
    pass


class NotEnoughCandidates(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class CorruptDataFile(DataError):
    pass


class VocabMismatch(DataError):
    pass


class ZeroEmbedding(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class NonFiniteLoss(NumericError):
    """Loss became NaN/inf; `diagnostics` holds the state at failure."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
