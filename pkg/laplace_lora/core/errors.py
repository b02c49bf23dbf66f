"""
Exception hierarchy for laplace-lora.

Every failure raised by the library derives from LaplaceLoraError so the CLI
can report it uniformly. Errors describing bad input also derive from
ValueError.
"""

from typing import Any, List, Optional


class LaplaceLoraError(Exception):
    """Raised when a laplace-lora operation fails"""

    pass


class NotPositiveDefinite(LaplaceLoraError, ValueError):
    """Raised when a Cholesky factorization fails after the jitter ladder"""

    pass


# The determinant-lemma code refers to this failure by its shorter name.
NotPD = NotPositiveDefinite


class NonSquare(LaplaceLoraError, ValueError):
    pass


class NotSymmetric(LaplaceLoraError, ValueError):
    pass


class KTooLarge(LaplaceLoraError, ValueError):
    pass


class DimTooLarge(LaplaceLoraError, ValueError):
    pass


class BadConfig(LaplaceLoraError, ValueError):
    pass


class DimMismatch(LaplaceLoraError, ValueError):
    pass


class TraceMismatch(LaplaceLoraError, ValueError):
    pass


class BadLabel(LaplaceLoraError, ValueError):
    pass


class TooLarge(LaplaceLoraError, ValueError):
    pass


class LayoutMismatch(LaplaceLoraError, ValueError):
    pass


class NonFinite(LaplaceLoraError):
    pass


class NonPositiveAlpha(LaplaceLoraError):
    """Raised when the Laplace bridge produces a non-positive Dirichlet parameter"""

    pass


class FormatError(LaplaceLoraError, ValueError):
    """Raised when a numeric text file is malformed"""

    pass


class LabelOutOfRange(LaplaceLoraError, ValueError):
    pass


class SplitLeakage(LaplaceLoraError):
    """Raised when a tuner is handed a dataset tagged as test data"""

    pass


class ParseError(LaplaceLoraError, ValueError):
    """Raised when a dataset CSV row cannot be parsed

    Attributes:
        line: 1-based line number in the source file (header is line 1)
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class Divergence(LaplaceLoraError):
    """Raised when MAP training produces a non-finite loss

    Attributes:
        step: Training step at which the loss became non-finite
        checkpoints: Checkpoints emitted before divergence; the last one is
            the last good state
    """

    def __init__(self, step: int, checkpoints: Optional[List[Any]] = None):
        self.step = step
        self.checkpoints = list(checkpoints or [])
        super().__init__(
            f"Training diverged at step {step} "
            f"({len(self.checkpoints)} good checkpoints kept)"
        )

    @property
    def last_checkpoint(self) -> Optional[Any]:
        return self.checkpoints[-1] if self.checkpoints else None
