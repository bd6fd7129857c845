"""Exception types raised across the package."""


class PoseliftError(Exception):
    """Base class for all errors raised by poselift."""


class DimensionError(PoseliftError, ValueError):
    pass


class ConfigError(PoseliftError, ValueError):
    pass


class ContractError(PoseliftError, ValueError):
    pass


class SchemaError(PoseliftError, ValueError):
    pass


class NormalizationError(PoseliftError, ValueError):
    pass


class GeometryError(PoseliftError, ValueError):
    pass


class AlignmentError(PoseliftError, ValueError):
    pass


class DataFormatError(PoseliftError, ValueError):
    """Malformed dataset file. Carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(PoseliftError, ValueError):
    pass


class TrainingDivergence(PoseliftError, RuntimeError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)
