"""Exception types raised across the package."""


class ConvJepaError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(ConvJepaError, ValueError):
    pass


class NonDivisible(ConvJepaError, ValueError):
    pass


class DegenerateMask(ConvJepaError, RuntimeError):
    pass


class NoVisiblePositions(ConvJepaError, ValueError):
    pass


class EmptyMask(ConvJepaError, ValueError):
    pass


class NonFiniteGradient(ConvJepaError, FloatingPointError):
    pass


class InvalidConfig(ConvJepaError, ValueError):
    pass


class DegenerateLabels(ConvJepaError, ValueError):
    pass


class EmptyTable(ConvJepaError, ValueError):
    pass


class EmptyDataset(ConvJepaError, ValueError):
    pass


class UndecodableImage(ConvJepaError, OSError):
    pass


class ZeroStd(ConvJepaError, ValueError):
    pass


class UnknownKey(ConvJepaError, KeyError):
    def __str__(self):
        # KeyError repr-quotes its message; keep it readable
        return str(self.args[0]) if self.args else ""


class ConfigTypeError(ConvJepaError, TypeError):
    pass


class MissingFile(ConvJepaError, FileNotFoundError):
    pass


class BadMagic(ConvJepaError, ValueError):
    pass


class VersionMismatch(ConvJepaError, ValueError):
    pass


class Truncated(ConvJepaError, EOFError):
    pass
