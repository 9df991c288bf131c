from enum import Enum
from typing import Sequence, Union


class ExitCode(Enum):
    OK = 0
    CONFIG_ERROR = 2
    DATA_ERROR = 3
    NUMERIC_ERROR = 4


class ConfigurationError(Exception):
    exit_code = ExitCode.CONFIG_ERROR


class DataError(Exception):
    exit_code = ExitCode.DATA_ERROR


class NumericError(Exception):
    exit_code = ExitCode.NUMERIC_ERROR


class DimensionError(ConfigurationError):
    pass


class ContractError(ConfigurationError):
    pass


class LabelError(ConfigurationError):
    pass


class SolverCapError(ConfigurationError):
    pass


class MalformattedToml(ConfigurationError):
    pass


class ParseError(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class EmptySetError(DataError):
    pass


class UnequalCardinalityError(DataError):
    pass


class DegenerateCloudError(DataError):
    pass


class CorruptCheckpointError(DataError):
    pass


class NonFiniteGradientError(NumericError):
    def __init__(self, parameter: str):
        super().__init__(f"Non-finite gradient for parameter '{parameter}'")
        self.parameter = parameter


class DivergenceError(NumericError):
    pass


Shape = Union[Sequence[int], tuple]


def ShapeMismatch(operation: str, left: Shape, right: Shape):
    raise DimensionError(
        f"{operation}: incompatible shapes {tuple(left)} and {tuple(right)}"
    )


def LineError(path: str, line_nb: int, message: str):
    raise ParseError(f"{path}:L{line_nb}: {message}")


def HeaderMismatch(key: str, stored, requested):
    raise ConfigurationError(
        f"Checkpoint header has {key}={stored!r} but {key}={requested!r} was requested"
    )
