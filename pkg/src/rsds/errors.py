"""Exception types shared across the package."""


class RSDSError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RSDSError, ValueError):
    """Inputs violate a documented precondition."""


class ManifoldError(ValidationError):
    pass


class InjectivityRadiusError(ManifoldError):
    pass


class CutLocusError(ManifoldError):
    pass


class DegenerateProjectionError(ManifoldError):
    pass


class NumericalError(RSDSError, ArithmeticError):
    """The computation broke down numerically (maps to CLI exit code 3)."""


class ChartOverflowError(NumericalError):
    pass


class DegeneratePullbackError(NumericalError):
    pass


class SingularityError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass


class DataError(ValidationError):
    pass
