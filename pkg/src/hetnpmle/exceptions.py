"""Exception hierarchy shared by every module of the package."""


class NPMLEError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(NPMLEError, ValueError):
    pass


class NotPositiveDefinite(NPMLEError, ValueError):
    pass


class EmptyDataset(NPMLEError, ValueError):
    pass


class LengthMismatch(NPMLEError, ValueError):
    pass


class AllWeightsOnUnderflowedAtoms(NPMLEError, FloatingPointError):
    """A row of the mixture likelihood is zero at working precision.

    Usually means the grid misses an observation entirely.
    """

    def __init__(self, rows):
        self.rows = list(rows)
        super().__init__(
            f"mixture likelihood underflows to zero for rows {self.rows[:10]}"
            + (" ..." if len(self.rows) > 10 else "")
        )


class ZeroLikelihoodRow(AllWeightsOnUnderflowedAtoms):
    pass


class ZeroDensity(NPMLEError, FloatingPointError):
    pass


class AllResponsibilitiesUnderflow(NPMLEError, FloatingPointError):
    pass


class GridTooLarge(NPMLEError, MemoryError):
    def __init__(self, n_atoms, cap):
        self.n_atoms = int(n_atoms)
        self.cap = int(cap)
        super().__init__(f"grid would have {self.n_atoms} atoms, cap is {self.cap}")


class DeltaOutOfRange(NPMLEError, ValueError):
    pass


class SizeLimit(NPMLEError, MemoryError):
    pass


class NonConvergence(NPMLEError, RuntimeError):
    """Raised by the solver when the dual gap target is not met.

    ``weights`` and ``certificate`` hold the partial (pruned) result.
    """

    def __init__(self, message, weights=None, certificate=None):
        super().__init__(message)
        self.weights = weights
        self.certificate = certificate
