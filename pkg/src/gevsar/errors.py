"""Exception hierarchy shared across the toolkit.

FormatError and its subclasses cover persisted-artifact problems and map to
a dedicated CLI exit code; the numerical errors map to another.
"""


class GevsarError(Exception):
    """Base class for all toolkit errors."""


class DomainError(GevsarError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class SingularMatrixError(GevsarError):
    """A linear system could not be solved to the required accuracy."""


class DegenerateFieldError(GevsarError):
    """A field has (numerically) zero spread and cannot be standardized."""


class DegenerateDesignError(GevsarError):
    """A regression design matrix is rank deficient."""


class FitFailureError(GevsarError):
    """An optimizer failed to produce any finite-objective candidate."""


class TrainingAbortError(GevsarError):
    """Training hit a non-finite loss; message carries epoch/batch/lr."""


class InputShapeError(GevsarError):
    """An array input does not match the shape a component expects."""


class ConfigurationError(GevsarError):
    """Mutually inconsistent configuration values."""


class FormatError(GevsarError):
    """A persisted artifact is malformed (bad magic bytes, bad layout)."""


class VersionError(FormatError):
    """A persisted artifact comes from an unsupported format version."""


class TruncatedPayloadError(FormatError):
    """A persisted artifact is shorter than its header promises."""


class ChecksumError(FormatError):
    """A persisted artifact's payload does not match its checksum."""
