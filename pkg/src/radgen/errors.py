"""Exception types shared across the package.

The CLI maps these to process exit codes (config 2, data 3, numeric 4).
"""


class ConfigError(ValueError):
    """Invalid, unknown, or ill-typed configuration."""


class DataError(ValueError):
    """Missing or malformed corpus artifacts (manifests, images, vocab files)."""


class NumericError(RuntimeError):
    """Non-finite values encountered during training or inference."""
