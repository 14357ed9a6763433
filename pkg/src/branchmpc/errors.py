"""Exception types raised by the solvers."""


class BranchMPCError(Exception):
    """Base class for all errors raised by :mod:`branchmpc`."""


class TreeError(BranchMPCError, ValueError):
    """Invalid tree specification or topology query."""


class SingularBlockError(BranchMPCError, ArithmeticError):
    """A batched kernel met a singular block.

    ``index`` is the position of the offending block in the flattened batch.
    """

    def __init__(self, index, what="matrix"):
        self.index = int(index)
        super().__init__(f"singular {what} in batch element {self.index}")


class FactorizationError(BranchMPCError, ArithmeticError):
    """A factorization failed; upstream data is indefinite or singular.

    Carries whatever location is known: a stage index, or the ``(k, j, i)``
    triple of a scan combination.
    """

    def __init__(self, message, stage=None, indices=None):
        self.stage = stage
        self.indices = indices
        super().__init__(message)


class RegularizationRequired(FactorizationError):
    """Signals that the Hessian must be regularized before retrying."""
