class RpfError(Exception):
    """Base class for every error raised by the lab"""

    exit_code = 1


class InputError(RpfError):
    """Bad user input, bad config or a violated precondition"""

    exit_code = 2


class ConfigError(InputError):
    pass


class ClassSplitError(InputError):
    pass


class BenchmarkNotFoundError(InputError):
    pass


class TargetLeakError(InputError):
    """Raised when target-domain data reaches a training or model-selection path"""


class MissingStateError(InputError):
    """Raised when an operation needs f0, h_lp or a prototype bank that has not been set"""


class EmptyPopulationError(InputError):
    pass


class LabelRangeError(InputError, ValueError):
    pass


class ShapeError(InputError, ValueError):
    pass


class FrozenParameterError(InputError):
    pass


class NumericalError(RpfError):
    exit_code = 3


class DivergenceError(NumericalError):
    """
    Raised when a training loss becomes non-finite or explodes

    Parameters
    ----------
    message (str): What diverged
    last_metrics (dict): The last finite metrics logged before the divergence
    """

    def __init__(self, message: str, last_metrics: dict | None = None):
        super().__init__(message)
        self.last_metrics = last_metrics or {}


class NonFiniteError(NumericalError):
    pass


class SingularTransformError(NumericalError):
    pass


class ZeroDenominatorError(NumericalError):
    pass


class FormatError(RpfError):
    exit_code = 4


class CheckpointFormatError(FormatError):
    pass


class CheckpointVersionError(FormatError):
    pass
