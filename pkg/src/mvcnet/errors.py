"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class MvcError(Exception):
    exit_code = 1


class ValidationError(MvcError, ValueError):
    """Input failed a type invariant or a documented precondition."""


class ContractError(ValidationError):
    """An API contract was violated (mismatched anchors, bad primitive, ...)."""


class PositivityError(ValidationError):
    """A matrix expected to be SPD has an eigenvalue below the floor."""


class ChartError(ValidationError):
    """Point or tangent vector falls outside the normal chart (cut locus)."""


class NonUniquenessError(ValidationError):
    """Points are too spread for the Fréchet mean to be unique."""


class PreconditionError(ValidationError):
    pass


class CheckpointVersionError(ValidationError):
    pass


class NumericalError(MvcError, ArithmeticError):
    exit_code = 3


class ConvergenceError(NumericalError):
    pass


class PoisonedGradientError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class PropertyFailure(MvcError, AssertionError):
    exit_code = 2
