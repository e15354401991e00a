"""Exception types shared across the toolkit.

Plain ``ValueError`` / ``IndexError`` / ``OSError`` are used for generic
argument, bounds, and I/O failures; the classes here carry semantics that
callers (notably the CLI) need to distinguish.
"""


class NoisyFLError(Exception):
    """Base class for all toolkit-specific errors."""


class ConfigError(NoisyFLError):
    """Invalid run configuration; message carries the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ParseError(NoisyFLError):
    """Malformed input file; carries row/column location when known."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        loc = ""
        if row is not None:
            loc += f" (row {row}"
            loc += f", column {column!r})" if column is not None else ")"
        super().__init__(message + loc)


class LabelRangeError(NoisyFLError):
    """Label column is not a contiguous integer range starting at 0."""


class DegeneratePartitionError(NoisyFLError):
    """A partition scheme produced an empty client after exhausting retries."""


class CoverageInfeasibleError(NoisyFLError):
    """label-quantity scheme cannot cover every class (K*c < C)."""


class LabelNotInMatrixError(NoisyFLError):
    """Dataset contains a label outside the transition matrix's class set."""


class LayoutMismatchError(NoisyFLError):
    """Model parameter vectors with incompatible layouts were combined."""


class ArtifactMismatchError(NoisyFLError):
    """Pipeline stage inputs do not match the hashes recorded upstream."""


class NumericalAbortError(NoisyFLError):
    """Training produced non-finite parameters; carries the failing round."""

    def __init__(self, round_t: int, message: str = "non-finite parameters"):
        self.round_t = round_t
        super().__init__(f"{message} at round {round_t}")
