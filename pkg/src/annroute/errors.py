"""Exception types shared across the package."""


class AnnRouteError(Exception):
    """Base class for all library errors."""


class UsageError(AnnRouteError, ValueError):
    """Invalid arguments or parameter combinations."""


class FormatError(AnnRouteError, ValueError):
    """Malformed file contents (bad magic, inconsistent record headers)."""


class CorruptionError(FormatError):
    """Checksum mismatch in a stored index file."""


class DegenerateInputError(UsageError):
    """Zero vector or coincident endpoints where a direction is required."""
