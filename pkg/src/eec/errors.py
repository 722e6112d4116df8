"""Exception types shared across the package."""


class EecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EecError):
    """An input tensor does not match the shape a model or op expects."""


class InvalidLabelError(EecError):
    """A class label is outside the valid range for the operation."""


class DivergenceError(EecError):
    """Training produced a non-finite loss or gradient."""


class ConfigError(EecError):
    """A configuration value is missing, unknown or out of range."""


class FormatError(EecError):
    """A serialized file is corrupt or has an unsupported layout."""


class BudgetError(EecError):
    """A memory-budget request cannot be satisfied."""


class InvariantError(EecError):
    """An internal invariant was violated (e.g. merging across labels)."""


class IntegrityError(EecError):
    """A downloaded or supplied file failed checksum verification."""
