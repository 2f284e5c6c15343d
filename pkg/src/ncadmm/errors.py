"""Exception types raised by the solvers and the problem model."""


class NcadmmError(Exception):
    """Base class for all package errors."""


class ValidationError(NcadmmError):
    """A problem instance is inconsistent (dimensions, rank, Lipschitz claim).

    ``witness`` carries whatever evidence triggered the failure, e.g. the
    pair of points violating a claimed Lipschitz constant.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class NumericalError(NcadmmError):
    """A function or iterate produced a non-finite value."""

    def __init__(self, message, point=None, state=None):
        super().__init__(message)
        self.point = point
        self.state = state


class InnerSolverError(NcadmmError):
    """An inner subproblem solver hit its iteration cap."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class CalibrationError(NcadmmError):
    """Penalty parameters violate the conditions required by the analysis."""


class CheckViolation(NcadmmError):
    """A runtime convergence check failed at ``check_level='full'``."""

    def __init__(self, message, iteration=None, check=None, state=None):
        super().__init__(message)
        self.iteration = iteration
        self.check = check
        self.state = state
