"""Exception hierarchy shared by every nbrflow module."""


class NbrflowError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(NbrflowError, ValueError):
    pass


class DomainError(NbrflowError, ValueError):
    pass


class NonFiniteError(NbrflowError, FloatingPointError):
    """An operation produced NaN or Inf."""


class NonScalarOutput(NbrflowError, ValueError):
    pass


class GraphNotFinalized(NbrflowError, RuntimeError):
    pass


class MissingConditioning(NbrflowError, ValueError):
    pass


class AlreadyInitialized(NbrflowError, RuntimeError):
    pass


class DegenerateData(NbrflowError, ValueError):
    pass


class InsufficientClassMembers(NbrflowError, ValueError):
    pass


class KTooLarge(NbrflowError, ValueError):
    pass


class EmptyTable(NbrflowError, ValueError):
    pass


class EmptyData(NbrflowError, ValueError):
    pass


class VariantMismatch(NbrflowError, ValueError):
    pass


class NonFiniteLoss(NbrflowError, FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class VersionMismatch(NbrflowError, ValueError):
    pass


class DigestMismatch(NbrflowError, ValueError):
    pass


class CorruptPayload(NbrflowError, ValueError):
    pass


class SingleClass(NbrflowError, ValueError):
    pass


class EmptySet(NbrflowError, ValueError):
    pass


class SizeMismatch(NbrflowError, ValueError):
    pass


class BadNeighborhoodId(NbrflowError, IndexError):
    pass


class MissingTable(NbrflowError, ValueError):
    pass


class MissingLabels(NbrflowError, ValueError):
    pass
