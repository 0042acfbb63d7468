"""Exception hierarchy shared by all modules."""


class WorldTimeError(Exception):
    """Base class for library errors."""


class DimensionError(WorldTimeError, ValueError):
    pass


class DomainError(WorldTimeError, ValueError):
    pass


class InfeasibleError(WorldTimeError, ValueError):
    """Raised when sampling constraints cannot be satisfied."""


class DegenerateError(WorldTimeError, ValueError):
    pass


class ContractViolation(WorldTimeError, ValueError):
    pass


class UnsupportedOpError(WorldTimeError, TypeError):
    """A non-differentiable operation was reached during backward."""


class TrainingError(WorldTimeError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ManifestParseError(WorldTimeError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset
