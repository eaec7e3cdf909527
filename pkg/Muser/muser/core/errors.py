"""Exception hierarchy shared by the core modules and the CLI.

Every error raised on purpose by MUSER derives from :class:`MuserError` and
carries the process exit code the CLI reports for it. Core code raises; only
``muser.cli`` translates exceptions into exit codes and messages.
"""
from __future__ import annotations

from typing import Optional


class MuserError(Exception):
    """Base class for all MUSER errors."""

    exit_code = 1


class UsageError(MuserError):
    """Invalid arguments, configuration values or templates."""

    exit_code = 1


class ConfigError(UsageError):
    pass


class TemplateError(UsageError):
    pass


class DataError(MuserError):
    """Malformed or missing input data (WAV, metadata, matrix, checkpoint)."""

    exit_code = 2


class NumericsError(MuserError):
    """Shape mismatches, non-finite values or failed numerical checks."""

    exit_code = 3


class TrainingError(NumericsError):
    """A training run hit a non-finite loss or gradient."""

    def __init__(self, message: str, batch_index: Optional[int] = None) -> None:
        if batch_index is not None:
            message = f"{message} (batch {batch_index})"
        super().__init__(message)
        self.batch_index = batch_index
