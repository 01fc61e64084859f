"""Exception hierarchy.

Validation failures (bad input files, out-of-range parameters, missing
data) derive from :class:`ValidationError`; the CLI maps them to exit code 2.
Everything that goes wrong after inputs were accepted is a
:class:`ComputationError` (exit code 1).
"""


class IndistinctError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(IndistinctError, ValueError):
    pass


class InputError(ValidationError):
    """Malformed or inconsistent input data."""


class ParseError(InputError):
    """A text file could not be parsed; carries the 1-based line number."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ParameterError(ValidationError):
    """A numeric parameter is outside its admissible range."""


class ConfigurationError(ValidationError):
    """Inputs are individually valid but do not fit together."""


class ComputationError(IndistinctError):
    pass


class SubsetTooSmallError(ComputationError):
    def __init__(self, subset: str, size: int, k: int):
        self.subset = subset
        self.size = size
        self.k = k
        super().__init__(
            f"subset '{subset}' has {size} points; at least K+1 = {k + 1} are needed"
        )
