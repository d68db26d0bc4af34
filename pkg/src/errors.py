"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid model, detector or experiment parameters."""


class InputError(ValueError):
    """Malformed input data (out-of-range values, unsorted or overlapping events)."""


class ConfigError(ValueError):
    """Config file is malformed or fails validation."""


class UnknownExperimentError(ConfigError):
    """Requested experiment name is not one the harness knows."""


class OutputError(OSError):
    """An output file or directory could not be written."""
