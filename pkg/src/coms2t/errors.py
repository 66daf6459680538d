"""Exception hierarchy shared by every coms2t module."""


class ComS2TError(Exception):
    """Base class for all library errors."""


class ConfigError(ComS2TError, ValueError):
    pass


class LoadError(ComS2TError, OSError):
    pass


class SchemaError(ComS2TError, ValueError):
    pass


class EmptyWindowError(ComS2TError, ValueError):
    pass


class ShapeError(ComS2TError, ValueError):
    pass


class NumericsError(ComS2TError, ArithmeticError):
    """Non-finite activations. ``layer`` names where it happened."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DivergenceError(NumericsError):
    pass


class LedgerError(ComS2TError, ValueError):
    pass


class BlockError(ComS2TError, ValueError):
    pass


class AdaptError(ComS2TError, ValueError):
    pass


class SingularityError(ComS2TError, ArithmeticError):
    pass


class ReportError(ComS2TError, OSError):
    pass
