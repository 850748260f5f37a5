"""Exception types raised across the package."""


class AdaPerceiverError(Exception):
    """Base class for all package errors."""


# tensor engine
class AllMaskedRow(AdaPerceiverError, ValueError):
    pass


class GraphCycle(AdaPerceiverError, RuntimeError):
    pass


class NonDeterministicF(AdaPerceiverError, RuntimeError):
    pass


# attention
class OddHeadDim(AdaPerceiverError, ValueError):
    pass


class EmptyGranularities(AdaPerceiverError, ValueError):
    pass


class NonMonotoneGranularities(AdaPerceiverError, ValueError):
    pass


class ShapeMismatch(AdaPerceiverError, ValueError):
    pass


# matryoshka / model
class MatDimOutOfRange(AdaPerceiverError, ValueError):
    pass


class BadImageShape(AdaPerceiverError, ValueError):
    pass


class InvalidConfig(AdaPerceiverError, ValueError):
    pass


# training
class LabelOutOfRange(AdaPerceiverError, ValueError):
    pass


class NonFiniteLoss(AdaPerceiverError, FloatingPointError):
    """Raised when the joint loss or its gradient stops being finite."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# policies
class UnknownPolicy(AdaPerceiverError, ValueError):
    pass


# data ingestion
class BadMagicNumber(AdaPerceiverError, ValueError):
    pass


class CountMismatch(AdaPerceiverError, ValueError):
    pass


class UnknownDataset(AdaPerceiverError, ValueError):
    pass
