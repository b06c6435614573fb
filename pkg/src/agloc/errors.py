"""Exception hierarchy shared across the package."""


class AglocError(Exception):
    """Base class for all package-specific errors."""
