"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and NumericalError to exit code 3;
everything else is a plain failure.
"""


class LatdiffError(Exception):
    """Base class for package errors."""


class ConfigError(LatdiffError):
    """Invalid configuration, arguments, or incompatible option combinations."""


class UnsupportedPolicyError(ConfigError):
    """A sampler policy that is undefined for the requested forward process."""


class ScheduleError(LatdiffError):
    """Schedule math called outside its domain (non-monotone gamma, bad eta, ...)."""


class DegenerateSigmaError(LatdiffError):
    """Marginal sigma too close to zero for a stable inversion or score."""


class NumericalError(LatdiffError):
    """Non-finite values encountered during training or sampling."""


class CheckpointError(LatdiffError):
    """Checkpoint file is malformed or from an incompatible version."""
