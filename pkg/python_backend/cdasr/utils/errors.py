"""
Exception hierarchy shared by the services and the CLI.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class CDASRError(Exception):
    """Base class for every error raised on purpose by this package."""


class RejectedInputError(CDASRError, ValueError):
    """An argument or precondition was violated by the caller."""


class EmptyDatasetError(RejectedInputError):
    """A directory yielded no decodable image."""


class ScaleMismatchError(RejectedInputError):
    def __init__(self, expected: int, actual: int, what: str = "scale") -> None:
        super().__init__(f"{what} mismatch: expected x{expected}, got x{actual}")
        self.expected = expected
        self.actual = actual


class NonFiniteGradientError(CDASRError):
    def __init__(self, parameter: str) -> None:
        super().__init__(f"non-finite gradient in parameter '{parameter}'")
        self.parameter = parameter


class TrainingDivergedError(CDASRError):
    """Raised when the total loss becomes NaN or infinite."""

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.snapshot: Dict[str, Any] = snapshot or {}


class CheckpointError(CDASRError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass
