"""Exception hierarchy shared across the package."""


class ClaspError(Exception):
    pass


class ConfigurationError(ClaspError, ValueError):
    pass


class DomainError(ClaspError, ValueError):
    pass


class StructuralError(ClaspError, ValueError):
    pass


class UsageError(ClaspError, RuntimeError):
    pass


class NumericError(ClaspError, FloatingPointError):
    def __init__(self, message: str, component: str | None = None):
        super().__init__(message)
        self.component = component


class RejectedRegionError(ClaspError):
    """Masked region has no visible pixels; caller drops it to background."""


class GranularityError(ClaspError):
    """Fewer foreground tokens than requested clusters."""


class InvariantViolation(ClaspError, AssertionError):
    pass


class ChecksumError(ClaspError):
    def __init__(self, tensor: str):
        super().__init__(f"checksum mismatch for tensor {tensor!r}")
        self.tensor = tensor
