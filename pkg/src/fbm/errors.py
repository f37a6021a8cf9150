"""Error taxonomy shared by the library and the CLI.

Exit codes: 1 config, 2 data, 3 numeric. The CLI maps exceptions to exit
codes through the `exit_code` attribute, so library code raises these
instead of bare ValueError whenever the failure is user-facing.
"""


class FbmError(Exception):
    exit_code = 1


class ConfigError(FbmError):
    """Bad model/run configuration: unknown variant, wrong dims, bad flags."""

    exit_code = 1


class DataError(FbmError):
    """Malformed input data: unparseable CSV, bad split, constant channel."""

    exit_code = 2


class NumericError(FbmError):
    """Non-finite values where finite ones are required (NaN loss, etc.)."""

    exit_code = 3


class CheckpointError(ConfigError):
    """Unreadable or mismatched checkpoint file."""
