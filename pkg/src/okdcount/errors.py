"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operand's shape violates an operation's contract."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class FormatError(ValueError):
    """A file on disk does not match its expected binary/JSON format."""
