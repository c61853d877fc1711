"""Exception types shared across the pipeline.

The CLI maps :class:`UsageError` to exit code 1 and every
:class:`DataError` subclass to exit code 2.
"""


class TumorGraphError(Exception):
    pass


class UsageError(TumorGraphError):
    pass


class DataError(TumorGraphError):
    pass


class FormatError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class SpecError(TumorGraphError, ValueError):
    pass


class ShapeError(TumorGraphError, ValueError):
    pass


class NumericError(TumorGraphError, FloatingPointError):
    pass
