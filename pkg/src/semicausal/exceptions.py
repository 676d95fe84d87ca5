"""Exception hierarchy shared by every module."""


class SemicausalError(Exception):
    """Base class for all errors raised by semicausal."""


class EvaluationError(SemicausalError, ValueError):
    """A function of the data produced a non-finite or undefined value."""


class PositivityError(SemicausalError, ValueError):
    """Treatment probability is zero, one, or outside the truncation band."""


class SingularDesignError(SemicausalError, ValueError):
    """A design, Gram or Jacobian matrix is (numerically) singular."""


class ConvergenceError(SemicausalError, RuntimeError):
    """An iterative fit stopped without converging.

    The last iterate is kept on ``last_iterate`` so callers can inspect it.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class SeparationError(ConvergenceError):
    """Logistic fit diverges because the classes are (quasi-)separated."""


class InsufficientDataError(SemicausalError, ValueError):
    """Not enough observations for the requested computation."""


class EnsembleError(SemicausalError, RuntimeError):
    """Every candidate learner in an ensemble failed."""


class DomainError(SemicausalError, ValueError):
    """An argument lies outside its admissible range."""


class PreconditionError(SemicausalError, ValueError):
    """A documented precondition does not hold."""


class ParseError(SemicausalError, ValueError):
    """Malformed input file."""


class FoldFitError(SemicausalError, RuntimeError):
    """A nuisance learner failed on the training complement of a fold."""

    def __init__(self, fold, cause):
        super().__init__(f"nuisance fit failed on the complement of fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause


class MonteCarloError(SemicausalError, RuntimeError):
    """Too many Monte-Carlo replications failed."""
