"""Exception types shared across the package.

The CLI maps these onto distinct exit codes: configuration problems (2),
IO/format problems (3), numerical aborts (4).
"""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConsistencyError(RuntimeError):
    """Cached state (argmax indices, masks) does not match the data it is applied to."""


class InputError(ValueError):
    """A value argument is out of its legal range (labels, angle counts, empty data)."""


class ConfigError(ValueError):
    """A run configuration is invalid; message names the offending field."""


class FormatError(RuntimeError):
    """A binary file (IDX dataset, checkpoint) does not match its declared format."""


class NumericalAbort(RuntimeError):
    """Training produced non-finite values and cannot continue."""
