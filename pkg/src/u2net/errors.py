"""Exception hierarchy shared by the library and the CLI.

Each family maps to one CLI exit code (see :mod:`u2net.cli`).
"""


class U2NetError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(U2NetError, ValueError):
    """Invalid shapes, channel counts or hyperparameters."""


class UsageError(U2NetError):
    """An API was called in a way its contract forbids."""


class DataError(U2NetError):
    """Unreadable, missing or mismatched input data."""


class NumericalError(U2NetError, ArithmeticError):
    """NaN/Inf during training or a failed gradient check."""


class CheckpointError(DataError):
    """Base class for checkpoint decoding failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    """Bad magic, truncated payload, trailing bytes or undecodable header."""


class CheckpointShapeError(CheckpointError):
    """Entries disagree with the network described by the embedded config."""
