"""Exception hierarchy shared across the package."""


class GenphaseError(Exception):
    """Base class for all package errors."""


class FormatError(GenphaseError):
    """A binary or text file does not conform to its declared format."""


class ModelValidationError(GenphaseError):
    """Generator layer chain or weight arrays are internally inconsistent."""


class DimensionError(GenphaseError):
    """Array shapes of the arguments do not line up."""


class ConfigError(GenphaseError):
    """A configuration value is out of range or inconsistent."""


class DataError(GenphaseError):
    """Input data is unusable (empty dataset, too few qualifying rows, ...)."""


class SolveFailed(GenphaseError):
    """Every restart of a solve diverged; no result can be returned."""
