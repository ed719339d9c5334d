"""Exception hierarchy.

Every error raised deliberately by the package derives from ``PoseRecError``
so callers (the CLI in particular) can map families of failures to exit codes.
"""


class PoseRecError(Exception):
    pass


class UsageError(PoseRecError):
    pass


# numerical failures (CLI exit 3)


class NumericalError(PoseRecError):
    pass


class ShapeError(NumericalError, ValueError):
    pass


class DegenerateVectorError(NumericalError, ValueError):
    pass


class DeterminismError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class WindowError(ShapeError):
    pass


# data / input failures (CLI exit 2)


class DataError(PoseRecError, ValueError):
    pass


class FormatError(DataError):
    pass


class GraphError(DataError):
    pass


class EmptyItemError(DataError):
    pass


class LabelError(DataError):
    pass


class SplitError(DataError):
    pass


class SpecError(DataError):
    pass


class MiningError(DataError):
    pass


class CatalogExhaustedError(MiningError):
    pass
