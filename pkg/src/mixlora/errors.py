"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericError(RuntimeError):
    """A non-finite value (NaN/Inf) showed up during computation."""


class ConfigError(ValueError):
    """A run configuration is malformed or violates an invariant."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or inconsistent."""
