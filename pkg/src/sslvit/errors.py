"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform (matmul inner dims, broadcasting, lengths)."""


class DomainError(ValueError):
    """Numeric input outside an operation's domain (log of <= 0, divide by zero)."""


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration key/value."""


class FormatError(ValueError):
    """Base class for binary file format problems."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was read."""


class VersionError(FormatError):
    """File carries an unsupported format version."""


class TrainingDivergedError(RuntimeError):
    """Loss became NaN/inf during training; carries the offending step index."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"training diverged (non-finite loss) at step {step}")
