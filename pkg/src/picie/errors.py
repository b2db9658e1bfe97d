"""Exception taxonomy shared by all modules.

The CLI maps these to exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""

from __future__ import annotations


class PicieError(Exception):
    """Base class for package errors."""


class ConfigError(PicieError):
    """Invalid or inconsistent configuration."""


class DataError(PicieError):
    """Missing, corrupt, or mismatched input data."""


class NumericalError(PicieError):
    """Non-finite or otherwise invalid numerical state.

    Carries the image ids of the offending batch when known.
    """

    def __init__(self, message: str, image_ids: tuple[str, ...] = ()):
        if image_ids:
            message = f"{message} (image ids: {', '.join(image_ids)})"
        super().__init__(message)
        self.image_ids = tuple(image_ids)
