"""Exception hierarchy shared by every stackvs module."""


class StackVSError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(StackVSError, ValueError):
    """Operand shapes or dimensions do not agree."""


class NumericError(StackVSError, ArithmeticError):
    """A computation produced NaN/Inf or overflowed."""


class ConfigError(StackVSError, ValueError):
    """A configuration document or argument is invalid."""


class FormatError(StackVSError):
    """An on-disk artifact has the wrong magic, version, size or checksum."""


class DataError(StackVSError):
    """Dataset content violates its declared contract."""
