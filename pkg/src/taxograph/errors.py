"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid experiment, model or scheme configuration."""


class IntegrityError(RuntimeError):
    """On-disk data or checkpoint does not match its manifest."""
