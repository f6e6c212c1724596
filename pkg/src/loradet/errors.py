"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class LoraDetError(Exception):
    exit_code = 3


class ArgumentError(LoraDetError, ValueError):
    exit_code = 1


class ShapeError(LoraDetError, ValueError):
    pass


class NumericError(LoraDetError, ArithmeticError):
    def __init__(self, message: str, off_diagonal: float | None = None):
        super().__init__(message)
        self.off_diagonal = off_diagonal


class StateError(LoraDetError, RuntimeError):
    pass


class ConfigError(LoraDetError):
    exit_code = 2


class SelectionError(LoraDetError):
    pass


class TrainingError(LoraDetError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class MergeError(LoraDetError):
    pass


class IntegrityError(LoraDetError):
    exit_code = 4
