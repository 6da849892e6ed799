"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent parameters."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite or exploding loss."""


class SaturationError(OverflowError):
    """A value does not fit the fixed-point range of the secure-aggregation codec."""


class IncompleteSharesError(RuntimeError):
    """A secure-aggregation round is missing shares from its roster."""
