"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates its documented bounds."""


class ShapeMismatchError(ValueError):
    """Array dimensions are inconsistent with the model or data."""


class DataError(ValueError):
    """Task construction, splitting, or fitting received unusable data."""


class NumericError(ValueError):
    """Non-finite values where finite numbers are required."""


class StateError(RuntimeError):
    """An object was used before it was fitted/initialized."""


class LeakageError(RuntimeError):
    """The train/test protocol was violated (sample or task leakage)."""


class MissingInputError(FileNotFoundError):
    """A required input file is absent."""


class IncompatibilityError(RuntimeError):
    """Artifacts from different runs/configs were combined."""
