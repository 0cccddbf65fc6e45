"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation problems exit 3, numerical
failures exit 5. Plain ``OSError`` is left alone and exits 4.
"""


class AnimeshError(Exception):
    """Base class for all package errors."""


class ValidationError(AnimeshError, ValueError):
    """Input violates a documented precondition or invariant."""


class MeshError(ValidationError):
    pass


class ObjParseError(MeshError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateTriangleError(MeshError):
    def __init__(self, faces, areas):
        self.faces = list(faces)
        self.areas = list(areas)
        shown = ", ".join(f"{f} (area={a:.3g})" for f, a in zip(self.faces[:10], self.areas[:10]))
        more = "" if len(self.faces) <= 10 else f" and {len(self.faces) - 10} more"
        super().__init__(f"degenerate triangles: {shown}{more}")


class SchemaError(ValidationError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class HashMismatchError(ValidationError):
    pass


class UnsupportedVersionError(ValidationError):
    pass


class NumericalError(AnimeshError, ArithmeticError):
    """Non-finite values or an unsolvable linear system."""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


class SingularSystemError(NumericalError):
    pass
