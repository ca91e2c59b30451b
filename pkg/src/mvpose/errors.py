"""Exception types shared across the package."""


class MvposeError(Exception):
    """Base class for all domain errors."""


class MissingFile(MvposeError):
    pass


class IoFailure(MvposeError):
    pass


class ShapeMismatch(MvposeError):
    pass


class InvariantViolation(MvposeError):
    pass


class DimensionMismatch(MvposeError):
    pass


class InsufficientSamples(MvposeError):
    pass


class MissingGeometry(MvposeError):
    pass


class DegenerateConfiguration(MvposeError):
    pass


class NumericalFailure(MvposeError):
    pass


class NonConvergence(MvposeError):
    pass


class NoValidModel(MvposeError):
    pass


class TooFewCorrespondences(MvposeError):
    pass


class EmptyDepth(MvposeError):
    pass


class NonPositiveDepth(MvposeError):
    pass


class OutOfGrid(MvposeError):
    pass


class NoSalientRegion(MvposeError):
    pass


class DegenerateCloud(MvposeError):
    pass


class EmptyTokenSet(MvposeError):
    pass


class DuplicateCategoryId(MvposeError):
    pass


class UnknownCategory(MvposeError):
    pass


class ConfigInvalid(MvposeError):
    pass


class EmptyErrorList(MvposeError):
    pass


class RankDeficientWarning(UserWarning):
    """Fewer usable principal directions than requested; k was reduced."""
