"""Exception types raised across the package.

CLI exit codes are attached to the errors that map onto them so the
command-line layer can stay a thin dispatcher.
"""


class DispenseForgeError(Exception):
    exit_code = 1


class ConfigError(DispenseForgeError):
    exit_code = 2

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# geometry
class InvalidGeometry(DispenseForgeError, ValueError):
    pass


class ZeroLengthPath(DispenseForgeError, ValueError):
    exit_code = 4


class WrongArity(DispenseForgeError, ValueError):
    pass


# flow oracle
class NoConvergence(DispenseForgeError, RuntimeError):
    exit_code = 5


# tensor engine
class ShapeMismatch(DispenseForgeError, ValueError):
    pass


class NotScalarLoss(DispenseForgeError, ValueError):
    pass


class GraphReused(DispenseForgeError, RuntimeError):
    pass


class CorruptWeights(DispenseForgeError, ValueError):
    exit_code = 3


# models / training
class NotPretrained(DispenseForgeError, RuntimeError):
    exit_code = 3


class FrozenViolation(DispenseForgeError, RuntimeError):
    pass


class DatasetEmpty(DispenseForgeError, ValueError):
    pass


class DegenerateLabels(DispenseForgeError, ValueError):
    pass


class RecipeInfeasible(DispenseForgeError, ValueError):
    pass


class CorruptDataset(DispenseForgeError, ValueError):
    exit_code = 3
