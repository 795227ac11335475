"""Exception hierarchy shared across the package."""


class DtrkitError(Exception):
    """Base class for all library errors."""


class SchemaError(DtrkitError):
    """A referenced column/variable is unknown or unusable (e.g. missing at a stage)."""


class DomainError(DtrkitError):
    """A value lies outside its declared domain (e.g. unknown action label)."""


class InvalidValueError(DtrkitError):
    """A numeric value is unusable (non-finite reward, bad parameter)."""


class StructureError(DtrkitError):
    """Malformed record structure (missing terminal row, non-contiguous stages, ...)."""


class DuplicateKeyError(DtrkitError):
    """Duplicate (id, stage) key."""


class StageRangeError(DtrkitError):
    """Stage or fold index out of the valid range."""


class FitError(DtrkitError):
    """A regression fit cannot be performed (empty data, absent level, ...)."""


class PositivityError(DtrkitError):
    """An empty realistic action set was encountered."""


class ConfigError(DtrkitError):
    """Invalid run/learner configuration."""


class AlignmentError(DtrkitError):
    """Results to be merged do not share the same id universe."""


class FormatError(DtrkitError):
    """Unsupported or mismatched serialization format/version."""
