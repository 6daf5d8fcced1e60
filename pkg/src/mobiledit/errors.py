"""Exception types shared across the package.

``InvalidArgument`` subclasses ``ValueError`` so callers that only care about
bad inputs can keep catching the builtin.
"""


class InvalidArgument(ValueError):
    pass


class NumericFailure(RuntimeError):
    """A loss or model output went non-finite."""

    def __init__(self, message: str, step: int | None = None, which: str | None = None):
        super().__init__(message)
        self.step = step
        self.which = which


class InfeasibleBudget(ValueError):
    pass


class DependencyError(RuntimeError):
    """A stage was asked to run before the stage it depends on."""

    def __init__(self, message: str, stage: str):
        super().__init__(message)
        self.stage = stage


class SchemaError(ValueError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path
