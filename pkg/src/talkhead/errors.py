"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalAbort`` -> 3.
"""


class TalkheadError(Exception):
    pass


class DataError(TalkheadError):
    """Invalid input data, file contents or asset invariants."""


class ShapeError(DataError, ValueError):
    pass


class NonFiniteError(DataError, FloatingPointError):
    pass


class AssetError(DataError):
    pass


class FormatError(DataError):
    """Bad magic, version or truncated binary container."""


class NumericalAbort(TalkheadError):
    """Optimization diverged (NaN/Inf loss or energy)."""


class UsageError(TalkheadError):
    pass
