"""Exception types; the CLI maps each to its own exit status."""


class DrfmError(Exception):
    pass


class ConfigError(DrfmError, ValueError):
    """Bad configuration or command-line usage."""


class DataFormatError(DrfmError, ValueError):
    """A file failed to parse or does not match what the caller needs."""


class NumericalError(DrfmError, ArithmeticError):
    """Non-finite values appeared during training or sampling."""
