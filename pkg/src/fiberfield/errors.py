"""Exception types shared across the package."""


class FiberFieldError(Exception):
    """Base class for all package errors."""


class InvalidArgument(FiberFieldError, ValueError):
    pass


class MeshError(FiberFieldError, ValueError):
    """Malformed mesh; ``entity`` names the offending element, e.g.
    ``("triangle", 12)`` or ``("edge", (3, 4))``, or ``("line", 7)`` for
    file parse errors."""

    def __init__(self, message: str, entity=None):
        super().__init__(message)
        self.entity = entity


class SolverError(FiberFieldError, RuntimeError):
    def __init__(self, message: str, entity=None):
        super().__init__(message)
        self.entity = entity


class NonFiniteLossError(FiberFieldError, FloatingPointError):
    def __init__(self, term: str, message: str | None = None):
        super().__init__(message or f"non-finite value in loss term {term!r}")
        self.term = term


class ConfigError(FiberFieldError, ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
