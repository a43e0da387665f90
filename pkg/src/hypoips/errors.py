"""Exception hierarchy shared by every module of the package."""


class HypoIPSError(Exception):
    """Base class for all package errors."""


class ShapeError(HypoIPSError, ValueError):
    pass


class NumericalError(HypoIPSError, ArithmeticError):
    pass


class EllipticModelError(HypoIPSError):
    """Raised when a smooth-block quantity is requested from a model with d_S = 0."""


class HypoellipticityViolation(HypoIPSError):
    pass


class DegenerateCovariance(NumericalError):
    def __init__(self, message, particle=None, step=None, theta=None):
        super().__init__(message)
        self.particle = particle
        self.step = step
        self.theta = theta


class BlowupError(NumericalError):
    def __init__(self, message, time=None, particle=None):
        super().__init__(message)
        self.time = time
        self.particle = particle


class DataError(HypoIPSError, ValueError):
    pass


class InitializationError(HypoIPSError):
    pass


class NotConditionallyLinear(HypoIPSError):
    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class FilterDegeneracy(NumericalError):
    def __init__(self, message, step=None, particle=None):
        super().__init__(message)
        self.step = step
        self.particle = particle


class OracleSizeError(HypoIPSError, ValueError):
    pass


class StructureError(HypoIPSError):
    pass


class InsufficientReplicates(HypoIPSError, ValueError):
    pass


class ConfigError(HypoIPSError, ValueError):
    pass
