"""Exception hierarchy shared across the package."""


class CVFEError(Exception):
    """Base class for all errors raised by cvfe_ions."""


class InvalidArgumentError(CVFEError, ValueError):
    pass


class MeshParseError(CVFEError, ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class GeometryError(CVFEError, ValueError):
    def __init__(self, message, simplex=None):
        self.simplex = simplex
        super().__init__(message)


class DomainError(CVFEError, ValueError):
    """A concentration left the open interval (0, 1)."""

    def __init__(self, message, vertex=None, species=None):
        self.vertex = vertex
        self.species = species
        super().__init__(message)


class ConfigurationError(CVFEError, ValueError):
    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class SolveError(CVFEError, ArithmeticError):
    def __init__(self, message, pivot=None):
        self.pivot = pivot
        super().__init__(message)


class StepFailure(CVFEError, RuntimeError):
    """Newton failed on a time step even after sub-stepping."""

    def __init__(self, message, report=None, time_index=None):
        self.report = report
        self.time_index = time_index
        super().__init__(message)
