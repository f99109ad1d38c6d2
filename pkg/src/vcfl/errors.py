"""Exception types shared across the package.

The CLI maps ValidationError (bad user input: configs, files, shapes the
user controls) to exit code 1 and everything else to exit code 2.
"""


class ValidationError(Exception):
    """Invalid user-supplied input: config values, file paths, data shapes."""


class DataFormatError(ValidationError):
    """Corrupt or mismatched on-disk artifact (bad magic, truncation, ...)."""


class NumericError(RuntimeError):
    """Numeric failure at runtime: non-finite losses, diverged training."""
