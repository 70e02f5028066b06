"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
data problems with 3 and checkpoint problems with 4.
"""


class SarMAEError(Exception):
    pass


class ShapeError(SarMAEError, ValueError):
    pass


class ParameterError(SarMAEError, ValueError):
    pass


class GraphError(SarMAEError, RuntimeError):
    pass


class ConfigError(SarMAEError):
    pass


class DataError(SarMAEError):
    pass


class IntegrityError(DataError):
    pass


class FormatError(DataError):
    pass


class CheckpointError(SarMAEError):
    pass


class DegenerateLossError(SarMAEError, ValueError):
    pass
