"""Custom exceptions for diffscene."""

from __future__ import annotations

from typing import Any


class DiffSceneError(Exception):
    """Base exception for all diffscene errors."""

    def __init__(self, message: str, hint: str | None = None) -> None:
        self.hint = hint
        full = message
        if hint:
            full += f"\n  Hint: {hint}"
        super().__init__(full)


class ConfigurationError(DiffSceneError):
    """Raised for invalid or inconsistent configuration values."""


class VocabularyError(DiffSceneError):
    """Raised for duplicate surfaces, out-of-vocabulary words, or ids out of range."""


class TokenKindError(DiffSceneError):
    """Raised when a token of the wrong kind appears where another kind is required."""


class RangeError(DiffSceneError, ValueError):
    """Raised when a numeric argument falls outside its legal interval."""


class ShapeError(DiffSceneError):
    """Raised when array shapes disagree with the model configuration."""


class GenerationError(DiffSceneError):
    """Raised when scene generation cannot satisfy its constraints."""


class AmbiguityError(DiffSceneError):
    """Raised when a grounding referent is not unique within its scene."""


class DatasetError(DiffSceneError):
    """Raised for refused overwrites and malformed dataset files."""


class FormatError(DiffSceneError):
    """Raised when a binary file is malformed. Carries the byte offset."""

    def __init__(self, message: str, offset: int, hint: str | None = None) -> None:
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})", hint=hint)


class NumericError(DiffSceneError):
    """Raised when a loss becomes non-finite. Carries the batch instance index."""

    def __init__(self, message: str, instance_index: int, hint: str | None = None) -> None:
        self.instance_index = instance_index
        super().__init__(f"{message} (instance {instance_index})", hint=hint)


class ScheduleError(DiffSceneError):
    """Raised when a decoding schedule cannot be built or is violated."""


class CompatibilityError(DiffSceneError):
    """Raised when a model and a dataset were built against different vocabularies."""


class TrainingError(DiffSceneError):
    """Raised when training aborts. Carries the last good checkpoint path, if any."""

    def __init__(
        self,
        message: str,
        last_good_checkpoint: Any = None,
        hint: str | None = None,
    ) -> None:
        self.last_good_checkpoint = last_good_checkpoint
        super().__init__(message, hint=hint)


class DecodeError(DiffSceneError):
    """Raised when decoding fails. Carries the trace recorded up to the failure."""

    def __init__(self, message: str, trace: Any = None, hint: str | None = None) -> None:
        self.trace = trace
        super().__init__(message, hint=hint)


class TraceFormatError(DiffSceneError):
    """Raised when a trace file is malformed. Carries the failing field path."""

    def __init__(self, field_path: str, problem: str) -> None:
        self.field_path = field_path
        super().__init__(f"Malformed trace at '{field_path}': {problem}")


class RunLockError(DiffSceneError):
    """Raised when another run already owns an output root."""


class OutputError(DiffSceneError):
    """Raised when an output location cannot be written."""


class DependencyError(DiffSceneError):
    """Raised when a required optional dependency is missing."""


def require_extra(module: str, extra: str = "") -> object:
    """Import *module* or raise :class:`DependencyError` with install hint.

    Returns the imported module object so callers can use it inline::

        plt = require_extra("matplotlib.pyplot", "viz")

    Args:
        module: Dotted module name (e.g. ``"matplotlib.pyplot"``).
        extra: The pip extra that provides this module (e.g. ``"viz"``).

    Returns:
        The imported module object.
    """
    import importlib

    try:
        return importlib.import_module(module)
    except ImportError as exc:
        top = module.split(".")[0]
        hint = f'pip install "diffscene[{extra}]"' if extra else f"pip install {top}"
        raise DependencyError(
            f"Missing optional dependency: {top}",
            hint=hint,
        ) from exc
