"""Exception hierarchy shared by all seflow modules."""


class SEFlowError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SEFlowError, ValueError):
    pass


class GradientError(SEFlowError, RuntimeError):
    pass


class AudioFormatError(SEFlowError, ValueError):
    """Unreadable or unsupported audio (bad header, codec, channels, rate)."""


class CompandingError(SEFlowError, ValueError):
    pass


class SilentSignalError(SEFlowError, ValueError):
    """An SNR or metric is undefined because a reference signal is silent."""


class ModelDegeneracyError(SEFlowError, ArithmeticError):
    """A 1x1 convolution became (numerically) singular."""


class NonFiniteLossError(SEFlowError, ArithmeticError):
    pass


class ConfigError(SEFlowError, ValueError):
    pass


class CheckpointError(SEFlowError, ValueError):
    pass
