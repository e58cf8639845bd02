"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: usage/config problems exit 1, data and
format problems exit 2, numeric failures exit 3.
"""


class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's contract."""


class ContractError(ValueError):
    """A precondition other than shape agreement was violated."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite / non-PSD values."""


class ParseError(ValueError):
    """Malformed mesh text. Carries the 1-based offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ValueError):
    """Malformed binary or tabular file (cloud, checkpoint, embedding CSV)."""


class GeometryError(ValueError):
    """Degenerate geometry: zero surface area, collapsed cloud, no valid crop."""


class ConfigError(ValueError):
    """Invalid model/run configuration."""
