"""Exception hierarchy shared by every module.

CLI exit codes key off these: ``ConfigError`` and ``DataError`` (and their
subclasses) exit with status 2, everything else with 1.
"""


class RelayError(Exception):
    """Base class for all package errors."""


class ConfigError(RelayError):
    """Invalid configuration, unknown keys, mismatched dimensions."""


class DataError(RelayError):
    """Malformed or inconsistent input data."""


class ShapeError(RelayError, ValueError):
    """Tensor shapes do not agree."""


class ContractError(RelayError):
    """A precondition of an operation was violated."""


class CapacityError(RelayError):
    """A sequence does not fit into a model's positional capacity."""


class VocabRangeError(RelayError, IndexError):
    """A token id lies outside the vocabulary."""
