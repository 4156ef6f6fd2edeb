"""Exception hierarchy shared by all pipeline stages.

Exit-code mapping used by the CLI: ArgumentError -> 2, DataError -> 3,
NumericError -> 4.
"""


class CloudSegError(Exception):
    exit_code = 1


class ArgumentError(CloudSegError):
    """Caller passed something structurally invalid."""
    exit_code = 2


class DataError(CloudSegError):
    """Input data is malformed or inconsistent."""
    exit_code = 3


class TensorFormatError(DataError):
    """File does not look like a CSEG tensor at all."""


class TensorCorruptionError(DataError):
    """CSEG header and payload disagree."""


class TensorVersionError(DataError):
    """CSEG version or dtype code unknown to this build."""


class NumericError(CloudSegError):
    """Non-finite values encountered where finite ones are required."""
    exit_code = 4
