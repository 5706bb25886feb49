class ConfigError(ValueError):
    """Inconsistent or out-of-range configuration."""


class FormatError(ValueError):
    """A file on disk does not match its binary or text format."""
