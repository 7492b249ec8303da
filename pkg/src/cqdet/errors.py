"""Exception types raised across the package."""


class DetectorError(Exception):
    """Base class for all errors raised by cqdet."""


class ConfigurationError(DetectorError, ValueError):
    """Invalid configuration value or inconsistent configuration."""


class ShapeError(DetectorError, ValueError):
    """Array or weight shapes do not line up."""


class RejectionError(DetectorError, ValueError):
    """An input was rejected, e.g. a detection with nonpositive depth."""


class MissingReferenceError(DetectorError, KeyError):
    """A referenced camera id, ego segment or kernel id does not exist."""


class FormatError(DetectorError, ValueError):
    """A file could not be parsed."""
