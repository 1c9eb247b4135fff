"""Error types shared across the package."""


class SkelclError(Exception):
    """Base class for package errors."""


class ConfigError(SkelclError, ValueError):
    """Invalid configuration value or unknown option."""


class ParseError(SkelclError, ValueError):
    """Malformed input file; message names the offending line."""
