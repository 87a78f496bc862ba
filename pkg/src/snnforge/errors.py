"""Shared exception types.

Every error raised on purpose by this package is one of these, so callers
(and the CLI exit-code mapping) can tell configuration mistakes, missing
files and numerical blow-ups apart without string matching.
"""


class ShapeError(ValueError):
    """An operand's shape violates an operation's contract.

    The message always names the offending dimension and both extents.
    """


class ConfigError(ValueError):
    """An experiment configuration is invalid; message lists every violation."""


class MissingArtifactError(FileNotFoundError):
    """A referenced checkpoint, stats file, dataset or network is absent."""


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf; message names the layer or step."""
