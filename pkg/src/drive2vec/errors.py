"""Exception hierarchy.  The CLI maps each category to its own exit code."""


class Drive2VecError(Exception):
    exit_code = 1


class ConfigError(Drive2VecError, ValueError):
    exit_code = 2


class DataError(Drive2VecError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    """Array dimensions do not match what an operation expects."""


class NumericError(Drive2VecError, FloatingPointError):
    """NaN/Inf appeared in activations, losses or gradients."""

    exit_code = 4


class ContaminationError(Drive2VecError):
    """Artifacts from incompatible schemas/splits were combined."""

    exit_code = 5
