"""Exception types shared across the package."""


class SubcalError(Exception):
    """Base class for all package errors."""


class DomainError(SubcalError):
    """An input or parameter lies outside its declared box."""


class FitError(SubcalError):
    """A model or emulator fit could not be completed."""


class NonConvergenceError(FitError):
    """The optimizer failed to improve on the starting point.

    Carries the best estimate seen so far in ``best``.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class ProbabilityError(SubcalError):
    """A sampling probability is missing, negative, or non-finite."""


class DegenerateScoresError(SubcalError):
    """Scores are too degenerate for the threshold rule (e.g. too many zeros)."""


class PilotError(SubcalError):
    """The pilot stage produced an unusable estimate (empty draw, singular fit)."""


class EstimationError(SubcalError):
    """An estimator was asked to run on unusable inputs (e.g. empty subsample)."""


class InferenceError(SubcalError):
    """Variance estimation failed (singular curvature, no usable points)."""


class IngestionError(SubcalError):
    """A data file could not be parsed into usable observations."""
