"""Exception types shared across the package."""


class RCRNError(Exception):
    pass


class TreeError(RCRNError, ValueError):
    """The language scene graph is not a rooted tree."""


class CycleError(TreeError):
    pass


class DisconnectedError(TreeError):
    pass


class MultiRootError(TreeError):
    pass


class DegenerateBox(RCRNError, ValueError):
    pass


class DimensionMismatch(RCRNError, ValueError):
    pass


class EmptyPhrase(RCRNError, ValueError):
    pass


class IndexSetMismatch(RCRNError, ValueError):
    pass


class NoRelations(RCRNError, ValueError):
    pass


class EmptyDataset(RCRNError, ValueError):
    pass


class InsufficientSamples(RCRNError, ValueError):
    pass


class BudgetExceeded(RCRNError, RuntimeError):
    pass


class GenerationFailed(RCRNError, RuntimeError):
    pass


class Rejected(RCRNError):
    """A relation substitution produced a false mismatch."""
