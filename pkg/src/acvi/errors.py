"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class FormatError(ValueError):
    """A data, config or checkpoint file does not follow its format."""
