"""Exception hierarchy shared by every module."""


class ModalFuseError(Exception):
    """Base class for all package errors."""


class ShapeError(ModalFuseError, ValueError):
    """Tensor extents are inconsistent with an operation's contract."""


class NumericError(ModalFuseError, ArithmeticError):
    """A NaN/Inf appeared, or an input left an operation's numeric domain."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StateError(ModalFuseError, RuntimeError):
    """An object was used in a state that forbids the call (e.g. replayed tape)."""


class ConfigError(ModalFuseError, ValueError):
    """Invalid configuration: bad strategy, unknown modality, malformed config file."""


class DataError(ModalFuseError, ValueError):
    """Dataset content violates its contract (e.g. class id out of range)."""


class FormatError(ModalFuseError, ValueError):
    """A binary file has a bad magic number, is truncated, or is otherwise malformed."""


class CoverageError(ModalFuseError, RuntimeError):
    """Pseudo-labelling produced no labelled pixel over an entire epoch."""
