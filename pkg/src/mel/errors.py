"""Exception types raised across the pipeline."""


class MelError(Exception):
    """Base class for all pipeline errors."""


class SingularTransform(MelError):
    pass


class InvalidTiling(MelError):
    pass


class InsufficientData(MelError):
    pass


class InvalidWindow(MelError):
    pass


class DivergedRefinement(MelError):
    """Refinement blew up; ``best`` holds the best transform seen so far."""

    def __init__(self, message, best=None, best_loss=float("nan")):
        super().__init__(message)
        self.best = best
        self.best_loss = best_loss


class PackingFailure(MelError):
    pass


class UnknownClass(MelError):
    pass


class EmptyAnnotation(MelError):
    pass


class DegenerateWeights(MelError):
    pass


class ShapeError(MelError, ValueError):
    pass


class UndefinedKappa(MelError):
    pass


class NonFiniteLoss(MelError):
    pass


class LowContrastWarning(UserWarning):
    pass
