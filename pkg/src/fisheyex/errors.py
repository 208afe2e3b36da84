"""Exception taxonomy shared by the library and the CLI.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericError -> 3.
"""


class UsageError(Exception):
    """Bad invocation: unknown flags, missing required arguments."""


class DataError(Exception):
    """Bad input data: missing files, malformed formats, mismatched shapes."""


class NumericError(Exception):
    """Numeric failure: non-finite losses, failed verification."""


class ImageFormatError(DataError):
    """PNG with unsupported bit depth, channel count, or a non-PNG payload."""


class TensorFormatError(DataError):
    """Raw tensor or checkpoint file failed structural validation."""


class CheckpointError(DataError):
    """Checkpoint does not match the expected architecture config."""


class BorderDetectionError(DataError):
    """Valid-radius detection failed (degenerate or full-frame input)."""
