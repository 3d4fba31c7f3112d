"""Exception hierarchy shared by all modules."""


class FracThmError(Exception):
    """Base class for all package errors."""


class GeometryError(FracThmError):
    pass


class SegmentNotRepresentable(GeometryError):
    pass


class DegenerateGeometry(GeometryError):
    pass


class NonConformingMesh(GeometryError):
    pass


class OrientationError(GeometryError):
    pass


class ParseError(FracThmError):
    """Malformed input text. Carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(FracThmError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class SingularLocalSystem(FracThmError):
    pass


class ShapeMismatch(FracThmError):
    pass


class NonFiniteResidual(FracThmError):
    pass


class DegenerateBound(FracThmError):
    pass


class NonConvergence(FracThmError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message)


class LinearSolveFailure(FracThmError):
    pass


class IoError(FracThmError):
    pass
