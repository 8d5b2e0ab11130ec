"""Exception hierarchy for eegalign.

Errors are grouped loosely by where they originate so the CLI can map them
onto exit codes: configuration problems, data/input problems, and numerical
or state problems hit at runtime.
"""


class EegAlignError(Exception):
    """Base class for all package-specific errors."""


# --- configuration ---------------------------------------------------------

class ConfigError(EegAlignError):
    """Invalid run configuration; ``keys`` lists every offending entry."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


# --- data / input ----------------------------------------------------------

class DataError(EegAlignError):
    """Base class for malformed or insufficient input data."""


class ShapeMismatch(DataError):
    pass


class SingleTrialContext(DataError):
    """A context set with fewer than two trials (or samples) was supplied."""


class NonFiniteInput(DataError):
    pass


class MissingClass(DataError):
    pass


class TooShort(DataError):
    pass


class InvalidBand(DataError):
    pass


class NoEvents(DataError):
    pass


class MalformedHeader(DataError):
    pass


class TruncatedRecord(DataError):
    def __init__(self, message, record_index=None):
        super().__init__(message)
        self.record_index = record_index


class ArchiveError(DataError):
    pass


class MissingSubjects(DataError):
    def __init__(self, message, subjects=()):
        super().__init__(message)
        self.subjects = tuple(subjects)


class UnknownStageCode(DataError):
    pass


class AdapterError(DataError):
    pass


class InsufficientTrials(DataError):
    pass


class TooFewSubjects(DataError):
    pass


class UnknownMontage(DataError):
    pass


class UnknownElectrode(DataError):
    pass


class IncompleteGrid(DataError):
    pass


# --- runtime / numerical ---------------------------------------------------

class RuntimeFailure(EegAlignError):
    """Base class for failures inside an otherwise valid computation."""


class ModeMismatch(RuntimeFailure):
    pass


class NotTrained(RuntimeFailure):
    pass


class SingularCovariance(RuntimeFailure):
    pass


class IncompatibleShape(RuntimeFailure):
    pass


class DivergedLoss(RuntimeFailure):
    pass


class DegenerateSpectrum(RuntimeFailure):
    pass
