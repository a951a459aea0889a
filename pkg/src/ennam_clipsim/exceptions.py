"""Exception hierarchy for ennam-django-clipsim.

Every error derives from :class:`ClipsimError` and from the builtin exception
it specializes, so callers may catch either.
"""

from typing import Optional


class ClipsimError(Exception):
    """Base class for all clipsim errors."""


class StateIndexError(ClipsimError, IndexError):
    """A state or action index lies outside the policy table."""


class DegenerateSnapshotError(ClipsimError, ValueError):
    """A snapshot probability is too small to form an importance ratio."""


class ExactModeTooLargeError(ClipsimError, ValueError):
    """The tree exceeds the exact-enumeration budget; use Monte Carlo mode."""


class SpecMismatchError(ClipsimError, ValueError):
    """Policy dimensions do not match the tree specification."""


class DegenerateGroupError(ClipsimError, ValueError):
    """A rollout group has fewer than two responses."""


class EmptyBatchError(ClipsimError, ValueError):
    """An operation that averages over a batch received no trajectories."""


class InvalidParameterError(ClipsimError, ValueError):
    """A numeric parameter is outside its allowed range."""


class TheoryConsistencyError(ClipsimError, ValueError):
    """A conditional statistic is undefined where its multiplier is nonzero."""


class ConfigError(ClipsimError, ValueError):
    """A run configuration failed validation."""


class NonFiniteError(ClipsimError, FloatingPointError):
    """A gradient, policy or metric became NaN or infinite."""

    def __init__(self, message: str, step: Optional[int] = None) -> None:
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
