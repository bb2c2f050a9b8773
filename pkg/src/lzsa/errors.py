"""Exception hierarchy shared by every stage of the analyzer."""


class LZSAError(Exception):
    """Base class for all analyzer errors."""


class DomainError(LZSAError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class PreconditionError(DomainError):
    """An input violates a documented precondition (e.g. non-unit Bloch vector)."""


class ConfigurationError(LZSAError, ValueError):
    """A configuration is internally inconsistent or numerically unusable."""


class DegenerateReferenceError(DomainError):
    """The rf reference envelope vanishes somewhere in the record."""


class LossOfSignalError(DomainError):
    """The spin envelope decayed below the usable fraction of its initial value."""


class InsufficientDataError(DomainError):
    """Too little unmasked data remains to fit a model."""


class CalibrationError(LZSAError, ValueError):
    """Calibration estimates are mutually inconsistent."""
