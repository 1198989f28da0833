"""Exception types raised across the package."""


class VarfiltError(Exception):
    """Base class for all package errors."""


class ConfigError(VarfiltError):
    """Invalid or inconsistent configuration (bad model/family combination,
    malformed parameter file, dimension mismatch caught before compute)."""


class ModelError(VarfiltError):
    """Model construction or use outside its domain of validity."""


class UnsupportedOperationError(VarfiltError):
    """Operation not available for this model/family (e.g. KS Jacobian)."""


class BlowupError(VarfiltError):
    """Non-finite values appeared during simulation or filtering."""

    def __init__(self, msg, step=None, partial=None):
        super().__init__(msg)
        self.step = step
        self.partial = partial


class DecompositionError(VarfiltError):
    """A Cholesky or eigenvalue factorization failed (matrix not SPD)."""


class FilterDivergenceError(VarfiltError):
    """The square-root transform left its domain of validity
    (eigenvalue of I - KH negative beyond tolerance)."""


class SingularTransportError(VarfiltError):
    """The affine analysis transport I - KH is not invertible."""


class ConvergenceError(VarfiltError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, msg, residual=None, history=None):
        super().__init__(msg)
        self.residual = residual
        self.history = history
