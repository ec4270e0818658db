"""
Structured errors shared by every package.

Library code raises these; only cli.py turns them into exit codes.
"""


class OsrefError(Exception):
    """Base class for all harness errors"""


class ConfigError(OsrefError):
    """A configuration value violates a documented constraint"""


class ScheduleError(ConfigError):
    """Invalid schedule geometry or out-of-range iteration"""


class ShapeError(OsrefError):
    """Operand shapes do not conform for a primitive op"""

    def __init__(self, op, *shapes, detail=None):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        message = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NumericFault(OsrefError):
    """An op produced NaN or Inf from its inputs"""

    def __init__(self, op, detail=None):
        self.op = op
        message = f"{op}: non-finite output"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class PrecisionError(OsrefError):
    """A 64-bit-only routine was called with 32-bit tensors"""


class DataError(OsrefError):
    """Corpus, token or task content is invalid"""


class FormatError(DataError):
    """A binary file is malformed, truncated or fails its CRC"""


class CheckpointError(FormatError):
    """A checkpoint file cannot be read back"""


class TaskSchemaError(DataError):
    """An eval task file violates the JSONL schema"""

    def __init__(self, path, line, detail):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {detail}")


class TrainingAborted(OsrefError):
    """Training stopped on a non-finite loss or gradient"""

    def __init__(self, iteration, lr, grad_norm, reason):
        self.iteration = iteration
        self.lr = lr
        self.grad_norm = grad_norm
        super().__init__(
            f"training aborted at iteration {iteration}: {reason} "
            f"(lr={lr:.6g}, grad_norm={grad_norm:.6g})"
        )


class ComparisonError(OsrefError):
    """Run points cannot be aligned, ranked or compared as requested"""
