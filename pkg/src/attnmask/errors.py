"""Exception hierarchy shared across the package.

Validation failures (bad inputs, malformed files, out-of-range parameters)
raise ValidationError so the CLI can map them to exit code 2; everything
else surfaces as a plain exception and maps to exit code 1.
"""


class AttnMaskError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(AttnMaskError, ValueError):
    """Input or parameter failed a documented precondition."""


class BundleFormatError(ValidationError):
    """An attention bundle on disk is structurally malformed."""


class DegenerateMapError(ValidationError):
    """A map that must carry signal is all-zero or non-finite."""


class StageError(AttnMaskError):
    """A pipeline stage failed for one sample.

    Carries enough context to locate the failure without digging
    through a traceback of the whole run.
    """

    def __init__(self, sample_id: str, stage: str, cause: BaseException):
        super().__init__(f"sample {sample_id!r}, stage {stage!r}: {cause}")
        self.sample_id = sample_id
        self.stage = stage
        self.cause = cause
