"""Exception hierarchy shared by every decalign module."""


class DecAlignError(Exception):
    """Base class for all errors raised by decalign."""


class ShapeMismatch(DecAlignError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class MismatchedDims(ShapeMismatch):
    pass


class MismatchedK(ShapeMismatch):
    pass


class EmptyInput(DecAlignError, ValueError):
    pass


class NonSymmetric(DecAlignError, ValueError):
    pass


class IndefiniteInput(DecAlignError, ValueError):
    pass


class NotPositiveDefinite(DecAlignError, ValueError):
    pass


class NoConvergence(DecAlignError, RuntimeError):
    """An iterative routine hit its iteration cap.

    ``payload`` carries whatever partial result the routine produced (for the
    Sinkhorn solver this is the :class:`~decalign.mmot.TransportPlan`).
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class NotScalar(DecAlignError, ValueError):
    pass


class DetachedRoot(DecAlignError, ValueError):
    pass


class EmptyComponent(DecAlignError, RuntimeError):
    def __init__(self, message, components=()):
        super().__init__(message)
        self.components = tuple(components)


class TooFewSamples(DecAlignError, ValueError):
    pass


class NonPositiveLambda(DecAlignError, ValueError):
    pass


class NonPositiveBandwidth(DecAlignError, ValueError):
    pass


class ZeroVector(DecAlignError, ValueError):
    pass


class SequenceTooShort(DecAlignError, ValueError):
    pass


class InvalidSpec(DecAlignError, ValueError):
    pass


class IncompatibleCheckpoint(DecAlignError, ValueError):
    pass


class ConfigError(DecAlignError, ValueError):
    pass
