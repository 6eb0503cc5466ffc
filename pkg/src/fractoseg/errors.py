"""Exception types raised across the package."""


class FractosegError(Exception):
    """Base class for all package errors."""


class UnknownLabel(FractosegError, KeyError):
    pass


class DegeneratePolygon(FractosegError, ValueError):
    pass


class ShapeMismatch(FractosegError, ValueError):
    pass


class InsufficientLabeled(FractosegError, ValueError):
    pass


class BadFractions(FractosegError, ValueError):
    pass


class NoLabeledRecords(FractosegError, ZeroDivisionError):
    pass


class EmptyImage(FractosegError, ValueError):
    pass


class NonFiniteResult(FractosegError, ArithmeticError):
    pass


class EmptySelection(FractosegError, ValueError):
    pass


class MissingScore(FractosegError, KeyError):
    pass


class SpatialSpecInStrong(FractosegError, ValueError):
    pass


class UnknownStrategy(FractosegError, KeyError):
    pass


class TooSmall(FractosegError, ValueError):
    pass


class GridMismatch(FractosegError, ValueError):
    pass


class NonFinite(FractosegError, ArithmeticError):
    pass


class EmptyDataset(FractosegError, ValueError):
    pass


class DivergedLoss(FractosegError, ArithmeticError):
    pass


class EmptyInput(FractosegError, ValueError):
    pass


class NoCrackPixels(FractosegError, ValueError):
    pass


class DegenerateWidth(FractosegError, ValueError):
    pass


class FrontNotFound(FractosegError, ValueError):
    pass


class InvalidSpec(FractosegError, ValueError):
    pass


class InvalidProfile(FractosegError, ValueError):
    pass


class ConfigInvalid(FractosegError, ValueError):
    pass


class PathMissing(FractosegError, FileNotFoundError):
    pass
