"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for bad input data,
3 for numerical failures.
"""


class LbspcError(Exception):
    exit_code = 2


class ParseError(LbspcError):
    pass


class ValidationError(LbspcError):
    pass


class NonManifoldError(ValidationError):
    pass


class DefectOutOfBounds(LbspcError):
    pass


class TooFewParts(LbspcError):
    pass


class InsufficientSpectrum(LbspcError):
    pass


class EmptyNeighborhood(LbspcError):
    pass


class NumericalError(LbspcError):
    exit_code = 3


class DegenerateBandwidth(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class ZeroVariance(NumericalError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateGeometry(NumericalError):
    pass


class FactorizationFailure(NumericalError):
    pass
