"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TaxKdError(Exception):
    """Base class for all package errors."""


class ValidationError(TaxKdError, ValueError):
    """Invalid user-supplied configuration or arguments."""


class ConfigError(ValidationError):
    pass


class ParseError(TaxKdError, ValueError):
    """Malformed input text. Carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}"
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DuplicateError(ParseError):
    pass


class DegenerateTreeError(TaxKdError):
    pass


class UnknownLabelError(TaxKdError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class NumericError(TaxKdError, ArithmeticError):
    pass


class ShapeError(TaxKdError, ValueError):
    pass


class StateError(TaxKdError, RuntimeError):
    pass


class TooShortError(TaxKdError, ValueError):
    pass


class KernelError(TaxKdError):
    pass


class MissingDataError(TaxKdError, KeyError):
    """Rows (abundances, embeddings, ground truth) missing for some contigs."""

    def __init__(self, what: str, ids):
        self.ids = list(ids)
        shown = ", ".join(self.ids[:10]) + (" ..." if len(self.ids) > 10 else "")
        super().__init__(f"missing {what} for {len(self.ids)} contig(s): {shown}")

    def __str__(self) -> str:
        return str(self.args[0])


class CoverageError(MissingDataError):
    pass


class AlignmentError(TaxKdError, ValueError):
    pass


class EmptyDatasetError(TaxKdError, ValueError):
    pass


class TrainingError(TaxKdError, RuntimeError):
    pass
