"""
Exception hierarchy for the hijacking lab.
Each error knows the CLI exit code it maps to.
"""


class HijackLensError(Exception):
    """Base class for all lab errors."""

    exit_code = 1


class ConfigurationError(HijackLensError, ValueError):
    """Invalid model configuration, knob or fixture parameter."""

    exit_code = 2


class FixtureValidationError(ConfigurationError):
    """Hand-built capture fixture violates attention invariants."""


class CapacityError(ConfigurationError):
    """Sequence does not fit into the model's max_seq."""


class DomainError(HijackLensError, ValueError):
    """Input outside the domain of an operation (empty lists, bad positions)."""

    exit_code = 2


class InputError(DomainError):
    """Inconsistent inputs such as disjoint scene ids or an empty scene dir."""


class ProfileIncompleteError(HijackLensError):
    """Profile lacks fields required by the requested stage, or is unreadable."""

    exit_code = 3


class NumericError(HijackLensError, ArithmeticError):
    """Non-finite activation or undefined ratio."""

    exit_code = 4


class DegenerateDistributionError(NumericError):
    """Distribution offers no separation (Otsu) or a row lost all support."""
