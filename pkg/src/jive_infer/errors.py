"""Exception hierarchy.

Every library failure derives from :class:`JiveInferError` so callers (and the
CLI) can separate user/input problems from numerical ones.
"""


class JiveInferError(Exception):
    """Base class for all package errors."""


class UserInputError(JiveInferError):
    """Bad input supplied by the caller (maps to CLI exit code 2)."""


class SchemaError(UserInputError):
    pass


class ParseError(UserInputError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ValidationError(UserInputError):
    def __init__(self, message, columns=None):
        super().__init__(message)
        self.columns = list(columns) if columns is not None else []


class UsageError(UserInputError):
    """Inconsistent request, e.g. a chi-bar reference for a starred family."""


class SpecError(UserInputError):
    """Invalid simulation specification."""


class NumericalError(JiveInferError):
    """Base class for numerical failures (maps to CLI exit code 1)."""


class KernelConstructionError(NumericalError):
    pass


class SingularityError(KernelConstructionError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateResidualError(NumericalError):
    pass


class NormalizationError(NumericalError):
    pass


class ConditioningError(NumericalError):
    def __init__(self, message, factor=None):
        super().__init__(message)
        self.factor = factor


class NonConvergenceError(NumericalError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = list(trajectory) if trajectory is not None else []


class CrossFitDegeneracyError(NumericalError):
    pass


class VarianceDegeneracyError(NumericalError):
    pass


class PrecisionError(NumericalError):
    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved
