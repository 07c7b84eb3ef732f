"""Exception hierarchy and machine-parsable error codes.

Every error surfaced by the CLI is printed to stderr with a ``CT-Exxx:``
prefix; the code is carried on the exception so library users can match
on it without string parsing.
"""

from __future__ import annotations


class CaltrainError(Exception):
    """Base class; ``code`` is the CT-Exxx identifier without the prefix."""

    code = "E000"

    def __str__(self) -> str:  # pragma: no cover - trivial
        return super().__str__() or self.__class__.__name__


class UsageError(CaltrainError):
    code = "E001"


class FileFormatError(CaltrainError):
    code = "E002"


class SpecSyntaxError(CaltrainError):
    """Architecture file could not be parsed; carries the line number."""

    code = "E010"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(CaltrainError):
    code = "E011"


class NonFiniteError(CaltrainError):
    code = "E012"


class MissingCacheError(CaltrainError):
    code = "E013"


class AuthenticationError(CaltrainError):
    """AES-GCM tag mismatch (tampering or wrong key)."""

    code = "E101"


class UnknownSourceError(CaltrainError):
    code = "E102"


class BudgetExceededError(CaltrainError):
    code = "E103"


class ProtocolError(CaltrainError):
    """Boundary protocol violation: bad frame, unknown tag, out-of-order message."""

    code = "E104"


class ReplayError(CaltrainError):
    code = "E105"


class QuoteRejectedError(CaltrainError):
    code = "E106"


class EnclaveStartupError(CaltrainError):
    code = "E107"


class OutMigrationError(CaltrainError):
    """Repartition tried to move an enclave-initialized layer to the host."""

    code = "E108"


class ZeroEmbeddingError(CaltrainError):
    code = "E110"


class DivergenceError(CaltrainError):
    code = "E111"


class AcceptanceFailure(CaltrainError):
    """An evaluate gate did not meet its configured threshold (CLI exit 3)."""

    code = "E300"
