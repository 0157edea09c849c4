"""Exception hierarchy shared by every natkit module."""


class NATError(Exception):
    """Base class for all natkit errors."""


class DimensionError(NATError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(NATError, ValueError):
    """Invalid hyperparameter or geometry (even kernel, indivisible extents, ...)."""


class PaddingRequiredError(ConfigurationError):
    """Window partitioning needs zero padding because extents are not multiples of the window."""


class NumericError(NATError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(NATError, ValueError):
    """A binary or JSON file does not match its declared format."""


class WeightError(NATError, ValueError):
    """A weight map does not match its model configuration."""
