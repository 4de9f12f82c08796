"""
Error hierarchy for the toolkit.

Every error that should end a CLI command carries its exit code, so main.py
can translate it without inspecting messages.
"""

from pathlib import Path
from typing import Optional


class CfProbeError(Exception):
    """Base class for errors that terminate a command."""

    exit_code: int = 1


class ConfigError(CfProbeError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(CfProbeError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = 3


class TrackParseError(DataError):
    """A track dataset file is missing a field or has a malformed one."""

    def __init__(self, field: str, message: str, path: Optional[Path] = None):
        self.field = field
        self.path = path
        location = f" in {path}" if path else ""
        super().__init__(f"Field '{field}'{location}: {message}")


class DivergenceError(CfProbeError):
    """Training produced a non-finite loss."""

    exit_code = 4

    def __init__(self, step: int, last_checkpoint: Optional[Path] = None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(
            f"Non-finite loss at step {step}; last good checkpoint: {last_checkpoint or 'none'}"
        )
