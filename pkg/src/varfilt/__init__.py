"""varfilt: learning filter analysis-map parameters by variational objectives.

Fixed Kalman gains (linear and extended filters) and EnKF inflation and
localization parameters are learned by minimizing a per-step cost pairing the
KL divergence from the analysis belief to the forecast belief with the
expected negative log-likelihood of each observation.
"""

__version__ = "0.1.0"

from .exceptions import (  # noqa: F401
    BlowupError,
    ConfigError,
    ConvergenceError,
    DecompositionError,
    FilterDivergenceError,
    SingularTransportError,
    UnsupportedOperationError,
    VarfiltError,
)
