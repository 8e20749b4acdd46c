"""Exception hierarchy.

Every error raised by the library derives from :class:`GCRError`.  The
``exit_code`` class attribute is what the command-line front end returns
when the error escapes a subcommand.
"""


class GCRError(Exception):
    exit_code = 4


class ValidationError(GCRError, ValueError):
    """Malformed input: wrong shape, asymmetric matrix, bad argument."""

    exit_code = 2


class IngestionError(ValidationError):
    """CSV could not be read into a clustered dataset."""


class FormulaError(ValidationError):
    """Syntax error in a mean or correlation formula."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class DesignError(ValidationError):
    """Design matrices could not be built from a dataset and formulas."""


class DiagnosticError(ValidationError):
    pass


class NumericalError(GCRError, ArithmeticError):
    exit_code = 4


class DomainError(NumericalError):
    """Matrix function evaluated outside its domain (e.g. log of a non-PD matrix)."""


class EstimationError(NumericalError):
    """Singular information or a similar failure inside the fitter."""


class InferenceError(NumericalError):
    pass


class FeasibilityError(GCRError, ValueError):
    """Target correlation cannot be attained for the requested margins."""

    exit_code = 2


class ScenarioError(FeasibilityError):
    """Simulation scenario could not produce a feasible cluster."""
