"""Exception hierarchy shared by the engine, models and CLI."""


class AtmError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AtmError, ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(AtmError, ValueError):
    """An argument value is outside the operation's domain."""


class ResolutionError(ArgumentError):
    """Input resolution is not supported by the backbone."""


class TapeStateError(AtmError, RuntimeError):
    """Gradient tape used in an invalid state."""


class OptimizerStateError(AtmError, RuntimeError):
    """Optimizer asked to step with missing gradients."""


class ConfigError(AtmError):
    """Invalid configuration; carries an optional 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(AtmError):
    """Dataset could not be read or does not match the model."""


class FormatError(DataError):
    """Malformed binary file (dataset records or checkpoint)."""


class ChecksumError(FormatError):
    """Checkpoint payload CRC32 does not match the stored value."""


class VersionError(FormatError):
    """Checkpoint format version is not supported."""


class NameSetError(FormatError):
    """Checkpoint tensor names differ from the expected parameter set."""


class NumericError(AtmError):
    """Non-finite value encountered during training or evaluation."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)
