"""Exception types shared across the package."""


class TerralabelError(Exception):
    """Base class for all package-specific errors."""


class RasterFormatError(TerralabelError):
    """Raised for malformed RBIN containers (bad magic, truncation, bad dtype)."""


class AlignmentError(TerralabelError):
    """Raised when rasters that must share a grid do not."""


class MappingError(TerralabelError):
    """Raised for codes outside a class vocabulary or mapping table."""


class ManifestError(TerralabelError):
    """Raised for scene manifests that violate the band contract."""


class TrainingError(TerralabelError):
    """Raised when a forest cannot be trained (e.g. no samples)."""


class ConfigError(TerralabelError):
    """Raised for invalid run or synthesis configuration files."""
