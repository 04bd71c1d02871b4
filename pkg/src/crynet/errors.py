"""Exception hierarchy shared by every crynet module."""


class CryNetError(Exception):
    """Base class for all crynet errors."""


class ShapeMismatchError(CryNetError, ValueError):
    pass


class InputTooShortError(CryNetError, ValueError):
    pass


class EmptyTimeError(CryNetError, ValueError):
    pass


class TimeMismatchError(ShapeMismatchError):
    pass


class NonScalarLossError(CryNetError, ValueError):
    pass


class DoubleBackwardError(CryNetError, RuntimeError):
    pass


class HeadIndivisibleError(ShapeMismatchError):
    pass


class ScaleIndivisibleError(ShapeMismatchError):
    pass


# audio
class UnsupportedFormatError(CryNetError, ValueError):
    pass


class CorruptHeaderError(CryNetError, ValueError):
    pass


class AllSilentError(CryNetError, ValueError):
    pass


class TooShortError(CryNetError, ValueError):
    pass


# model / checkpoint
class ConfigInvalidError(CryNetError, ValueError):
    pass


class VersionMismatchError(CryNetError, ValueError):
    pass


class CorruptCheckpointError(CryNetError, ValueError):
    pass


# training
class LabelOutOfRangeError(CryNetError, ValueError):
    pass


class EmptyClassError(CryNetError, ValueError):
    pass


class NaNLossError(CryNetError, FloatingPointError):
    pass
