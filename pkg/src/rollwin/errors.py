"""Exception types shared across the package.

Dimension/shape violations on individual operations raise plain ValueError;
the classes here cover failures that need a distinct exit path (CLI exit
codes: config 2, training divergence 3, invariant violation 4).
"""


class RollwinError(Exception):
    """Base class for package-specific failures."""


class ConfigError(RollwinError):
    """Invalid or inconsistent configuration."""


class StateCorruptionError(RollwinError):
    """A streaming-state invariant was violated (gap, bad ordering, bad stage)."""


class LookaheadUnderrunError(RollwinError):
    """Conditioning frames do not cover the window's look-ahead horizon.

    Library mode treats this as an error; buffering is the caller's job.
    """


class TrainingDivergenceError(RollwinError):
    """A training loss became non-finite."""


class NumericError(RollwinError):
    """A numeric result left the finite range."""
