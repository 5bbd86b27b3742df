"""Exception hierarchy shared by every dspg module."""

from __future__ import annotations

import numpy as np


class DSPGError(Exception):
    """Base class for all errors raised by dspg."""


class InvalidDimensionError(DSPGError, ValueError):
    pass


class InvalidAgentError(DSPGError, IndexError):
    pass


class UnsupportedOperationError(DSPGError, NotImplementedError):
    pass


class EnumerationLimitError(DSPGError, ValueError):
    pass


class NumericalOverflowError(DSPGError, FloatingPointError):
    """An objective evaluation returned a non-finite value.

    The offending evaluation point is kept on ``point`` so the caller can
    report where the iterate blew up.
    """

    def __init__(self, message: str, point=None):
        super().__init__(message)
        self.point = None if point is None else np.array(point, dtype=float)


class ConfigError(DSPGError, ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))
