"""Exception hierarchy shared by every subsystem.

Each class carries the process exit code the CLI maps it to.
"""


class XbarError(Exception):
    exit_code = 1


class ConfigError(XbarError):
    """Invalid configuration or spec input. ``line`` is 1-based when known."""

    exit_code = 2

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None and line is not None:
            where = f"{path}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        elif path is not None:
            where = f"{path}: "
        super().__init__(where + message)


class ShapeError(ConfigError):
    """Tensor or layer shapes that do not chain."""


class UsageError(XbarError):
    """API called out of order (e.g. backward before forward)."""


class NumericalError(XbarError):
    """Non-finite values or a diverging optimisation."""

    exit_code = 3

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class ConvergenceError(NumericalError):
    """Circuit solver did not reach its KCL tolerance."""

    def __init__(self, message, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message, {"residual": residual, "iterations": iterations})


class MissingArtifactError(XbarError):
    exit_code = 4


class DataFormatError(XbarError):
    exit_code = 2


class MagicMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    def __init__(self, expected, actual, path=None):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{path or 'file'} truncated: expected {expected} bytes, got {actual}"
        )


class LabelRangeError(DataFormatError):
    def __init__(self, index, label, classes):
        self.index = index
        self.label = label
        super().__init__(f"label {label} at index {index} outside [0, {classes})")


class SearchDivergedError(NumericalError):
    """Loss became non-finite; ``trace`` holds the rows recorded so far."""

    def __init__(self, message, trace, diagnostics=None):
        self.trace = trace
        super().__init__(message, diagnostics)
