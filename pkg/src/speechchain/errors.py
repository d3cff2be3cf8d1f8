"""Exception types shared across the package.

Every error a caller is expected to handle programmatically gets its own
class; plain ValueError/RuntimeError are reserved for genuine bugs.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """A numeric hyperparameter is outside its legal range."""


class InputError(ValueError):
    """A data argument violates a precondition (empty text, bad ids, ...)."""


class ConfigError(ValueError):
    """Inconsistent or conflicting configuration."""


class ParseError(ValueError):
    """Malformed corpus or config file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InfeasibleAlignmentError(ValueError):
    """CTC target cannot be aligned to the given number of frames."""


class DegenerateRatioError(ValueError):
    """Loss-ratio schedule hit a zero previous loss."""


class NumericError(RuntimeError):
    """Non-finite value where a finite one is required."""


class ResumeError(RuntimeError):
    """Checkpoint missing or incompatible with the requested run."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        self.epoch = epoch
        self.step = step
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class PrerequisiteError(RuntimeError):
    """A required upstream artifact does not exist yet."""

    def __init__(self, missing: str, hint: str):
        self.missing = missing
        self.hint = hint
        super().__init__(f"missing prerequisite: {missing} ({hint})")
