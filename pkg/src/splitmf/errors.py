"""Exception types shared across the package."""


class SplitMFError(Exception):
    """Base class for all package errors."""


class ShapeError(SplitMFError, ValueError):
    """Operands have inconsistent dimensions."""


class ConfigError(SplitMFError, ValueError):
    """Invalid configuration or parameter value."""


class DegenerateInputError(SplitMFError, ValueError):
    """Input is empty or otherwise carries no usable data."""


class DivergenceError(SplitMFError, RuntimeError):
    """Training produced a non-finite value."""

    def __init__(self, epoch: int, what: str = "training"):
        self.epoch = epoch
        super().__init__(f"{what} diverged (non-finite value) at epoch {epoch}")


class EncodingOverflowError(SplitMFError, ValueError):
    """A value does not fit in the fixed-point headroom."""


class ProtocolError(SplitMFError, RuntimeError):
    """Malformed frame, round desync, or wrong message count."""


class TransportError(SplitMFError, RuntimeError):
    """A channel failed to deliver or receive a frame."""


class ParseError(SplitMFError, ValueError):
    """A data file could not be parsed."""


class IllConditionedError(SplitMFError, ValueError):
    """The chosen pivot component is too small to invert."""


class EmptyTraceError(SplitMFError, ValueError):
    """A capture contains no usable frames."""
