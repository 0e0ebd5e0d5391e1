"""Exception hierarchy shared by every irsr module.

Each class carries the process exit code the CLI maps it to, so commands can
fail with distinct codes per failure class.
"""

from __future__ import annotations


class IrsrError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1


class ConfigurationError(IrsrError):
    """Invalid configuration, schedule, manifest or dataset layout."""

    exit_code = 2


class ParameterError(ConfigurationError):
    """A numeric parameter is outside its valid domain (e.g. sigma <= 0)."""


class InputError(IrsrError):
    """Bad input data: missing files, missing masks, out-of-range values."""

    exit_code = 3


class DimensionError(InputError):
    """Array shapes are incompatible with the requested operation."""


class DegenerateInputError(InputError):
    """Input carries no usable signal (e.g. an all-zero absorbance band)."""


class NumericError(IrsrError):
    """A loss or metric became non-finite."""

    exit_code = 4


class CheckpointError(IrsrError):
    """Checkpoint file is truncated, corrupted or has an unknown version."""

    exit_code = 5
