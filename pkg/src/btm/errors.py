"""Exception types shared across the package."""


class BTMError(Exception):
    """Base class for package errors."""


class ConfigError(BTMError, ValueError):
    """Invalid model, sampler, or run configuration."""


class DomainError(BTMError, ValueError):
    """Argument outside the domain of a function."""


class DataError(BTMError, ValueError):
    """Malformed or inconsistent input data."""


class InitializationError(BTMError, RuntimeError):
    """Sampler could not find a finite starting point."""


class AdaptationError(BTMError, RuntimeError):
    """Step-size adaptation collapsed."""


class SplitError(BTMError, ValueError):
    """A hold-out plan produced an unusable partition."""
