"""Exception hierarchy. Each class carries the CLI exit code of its error class."""


class StyleMTError(Exception):
    exit_code = 1


class UsageError(StyleMTError):
    exit_code = 2


class DataError(StyleMTError):
    exit_code = 3


class DecodeError(DataError):
    pass


class ConfigError(StyleMTError):
    exit_code = 4


class DimensionError(ConfigError):
    pass


class HeadDisabledError(ConfigError):
    pass


class UnsupportedVariantError(ConfigError):
    pass


class EvaluationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(StyleMTError):
    exit_code = 5

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class GraphError(StyleMTError):
    """Backward called without a matching forward."""
