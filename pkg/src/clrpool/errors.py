"""Exception hierarchy.

Two families map onto the CLI exit-code contract: :class:`InputError`
(exit 1) for anything wrong with data, terms or configuration, and
:class:`NumericalError` (exit 2) for failures of the optimizer.
"""


class ClrPoolError(Exception):
    """Base class for every error raised by this package."""


class InputError(ClrPoolError, ValueError):
    """Bad data, bad terms, bad configuration."""


class NumericalError(ClrPoolError, ArithmeticError):
    """The fitter could not produce a usable estimate."""


# --- cohort validation -----------------------------------------------------

class CohortError(InputError):
    """Cohort validation failure.

    ``diagnostics`` lists one ``(stratum_id, message)`` pair per offending
    stratum so callers can report every problem, not only the first.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class DuplicateSubject(CohortError):
    pass


class StratumWithoutCase(CohortError):
    pass


class StratumWithMultipleCases(CohortError):
    pass


class MissingCovariate(CohortError):
    pass


class NonFiniteValue(CohortError):
    pass


class StratumNodeConflict(CohortError):
    """A matched set whose subjects are spread over several nodes."""


# --- terms -----------------------------------------------------------------

class ParseError(InputError):
    def __init__(self, message, text, position):
        super().__init__(f"{message} at offset {position} in {text!r}")
        self.text = text
        self.position = position


class UnknownVariable(InputError):
    pass


class DomainError(InputError):
    """A transformation was applied outside its domain (log of x <= 0)."""


# --- engine ----------------------------------------------------------------

class DimensionMismatch(InputError):
    pass


class AliasedCovariate(InputError):
    """A column that never varies within a stratum."""

    def __init__(self, terms):
        self.terms = list(terms)
        names = ", ".join(self.terms)
        super().__init__(
            f"term(s) {names} are constant within every stratum and cannot be "
            "estimated by conditional logistic regression"
        )


class SeparationDetected(NumericalError):
    pass


class SingularHessian(NumericalError):
    pass


class NotConverged(NumericalError):
    pass


class NotNested(InputError):
    pass


class StrataMismatch(InputError):
    pass


# --- pooling ---------------------------------------------------------------

class InvalidPoolsize(InputError):
    pass


class Infeasible(InputError):
    pass


class PlanMismatch(InputError):
    pass


class SparseLabelClass(InputError):
    def __init__(self, label, message):
        super().__init__(message)
        self.label = label


# --- protocol --------------------------------------------------------------

class ProtocolError(ClrPoolError):
    """Raised by the distributed protocol; ``stage`` names the failing step."""

    stage = None

    def __init__(self, message, stage=None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class NodeUnreachable(ProtocolError, InputError):
    pass


class MatchingRatioMismatch(ProtocolError, InputError):
    pass


class UnknownStratum(ProtocolError, InputError):
    pass


class RangeExceeded(ProtocolError, InputError):
    pass


class RingBroken(ProtocolError):
    pass


class StageFailed(ProtocolError):
    """Wraps any error escaping a protocol stage."""

    def __init__(self, stage, cause):
        super().__init__(f"protocol stage {stage!r} failed: {cause}", stage=stage)
        self.cause = cause


# --- warnings --------------------------------------------------------------

class DisclosureWarning(UserWarning):
    """Pools small enough that member values can be recovered algebraically."""


class BiasWarning(UserWarning):
    """Pool size large enough to bias estimates noticeably."""


class EmptyCohortWarning(UserWarning):
    pass
