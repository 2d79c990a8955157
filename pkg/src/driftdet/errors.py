"""Exception taxonomy shared across the package.

Exit-code mapping used by the CLI: usage errors exit 2 (argparse),
ConfigurationError exits 3, NumericalError exits 4.
"""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value violates its documented constraints."""


class TapeUsageError(RuntimeError):
    """A tape was used outside its contract (e.g. backward through a foreign node)."""


class NumericalError(ArithmeticError):
    """Non-finite values were produced; the message names the offending op."""


class FormatError(ValueError):
    """A serialized file does not match its declared binary format."""
