"""Exception taxonomy shared by all modules.

Validation problems (bad files, bad arguments, inconsistent references)
derive from :class:`ValidationError`; numeric breakdowns during training
derive from :class:`NumericError`.  The CLI maps the former to exit code 1
and the latter to exit code 2.
"""


class ValidationError(Exception):
    """Base for all input/argument validation failures."""


class FormatError(ValidationError):
    """A file does not conform to its wire format.

    ``offset`` is the byte offset (binary files) or line number (text files)
    at which the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(ValidationError):
    """Cross-references between records do not resolve."""


class ArgumentError(ValidationError):
    """An operation was called with out-of-contract arguments."""


class DegenerateGeometryError(ValidationError):
    """All points coincide, so distances cannot be normalized."""


class DegenerateInputError(ValidationError):
    """A zero-norm vector reached an operation that requires direction."""


class BatchCompositionError(ValidationError):
    """A contrastive batch violates its composition contract."""


class UndefinedMetricError(ValidationError):
    """A statistic is undefined for the given data (e.g. constant input)."""


class NumericError(Exception):
    """Base for numeric failures during computation."""


class TrainingDivergedError(NumericError):
    """A loss became non-finite; carries the stage and step it happened at."""

    def __init__(self, stage, step, value=None):
        super().__init__(f"training diverged in stage '{stage}' at step {step}"
                         + (f" (loss={value})" if value is not None else ""))
        self.stage = stage
        self.step = step
