"""Benchmark dynamics models and their time integrators.

Three forecast models are provided: a random stable linear map, the
Lorenz '96 ODEs (one RK4 step per assimilation step), and the
Kuramoto-Sivashinsky PDE (pseudospectral ETDRK4, several substeps per
assimilation step).  Each model knows how to advance states, propagate
tangent vectors, and (where supported) produce the exact Jacobian of its
step map.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels, rng
from .exceptions import BlowupError, ModelError, UnsupportedOperationError

__all__ = [
    "LinearDynamics",
    "Lorenz96Dynamics",
    "KSDynamics",
    "ObservationModel",
    "make_stable_random_matrix",
    "make_process_noise",
    "l96_vector_field",
    "rk4_step",
    "dynamics_jacobian",
    "ks_precompute",
    "ks_step",
    "ks_step_jvp",
]


def make_stable_random_matrix(dim, seed):
    """Random symmetric matrix with spectral radius strictly below one.

    Draws W with i.i.d. standard-normal entries, symmetrizes it as
    (W + W^T)/2, and rescales its eigenvalues by the largest eigenvalue
    modulus plus 1/10, reassembling in the original eigenbasis.  The result
    has spectral radius lam_max / (lam_max + 0.1) < 1.
    """
    if dim < 1:
        raise ModelError(f"dimension must be >= 1, got {dim}")
    gen = rng.substream(seed, rng.MODEL, 0)
    W = gen.standard_normal((dim, dim))
    Wsym = 0.5 * (W + W.T)
    vals, vecs = np.linalg.eigh(Wsym)
    lam_max = np.max(np.abs(vals))
    return vecs @ np.diag(vals / (lam_max + 0.1)) @ vecs.T


def make_process_noise(dim, seed, scale=0.25):
    """SPD process-noise covariance Q Q^T + (1/10) I with Q_ij ~ N(0, scale)."""
    if dim < 1:
        raise ModelError(f"dimension must be >= 1, got {dim}")
    if scale < 0:
        raise ModelError(f"noise scale must be >= 0, got {scale}")
    gen = rng.substream(seed, rng.MODEL, 1)
    Q = np.sqrt(scale) * gen.standard_normal((dim, dim))
    return Q @ Q.T + 0.1 * np.eye(dim)


def l96_vector_field(x, F, classic=False):
    """Lorenz '96 tendency, component i:  -x_{i-1} (x_{i-2} + x_{i+1}) - x_i + F
    with cyclic indices.  ``classic=True`` switches to the more common
    x_{i-1} (x_{i+1} - x_{i-2}) ordering of the quadratic term.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 4:
        raise ModelError(f"Lorenz '96 needs dimension >= 4, got {x.shape[0]}")
    if x.ndim == 1:
        return kernels.l96_tendency_single(x, float(F), bool(classic))
    return kernels.l96_tendency_batch(np.ascontiguousarray(x), float(F), bool(classic))


def rk4_step(f, x, dt):
    """Classical fourth-order Runge-Kutta update for tendency ``f``."""
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# Kuramoto-Sivashinsky: u_t + u_xxxx + u_xx + u u_x = 0 on a circle of
# length L, pseudospectral in space, ETDRK4 in time.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ETDRK4Coeffs:
    """Per-mode exponential integrator coefficients (rfft layout, D//2+1 modes)."""

    E: np.ndarray
    E2: np.ndarray
    Q: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    ik: np.ndarray
    dealias: np.ndarray


def ks_precompute(L, D, dt, contour_points=32, contour_radius=1.0):
    """ETDRK4 coefficients for the KS equation.

    The linear symbol is l(k) = k^2 - k^4 on wavenumbers k = 2*pi*n/L.  The
    psi-function coefficients are evaluated by averaging over
    ``contour_points`` points on a circle of radius ``contour_radius`` around
    each l*dt, which avoids cancellation for small |l*dt|.  The top third of
    modes is flagged for dealiasing of the quadratic term (2/3 rule).
    """
    if D % 2 != 0:
        raise ModelError(f"KS grid size must be even, got {D}")
    if L <= 0 or dt <= 0:
        raise ModelError("KS needs L > 0 and dt > 0")
    k = 2.0 * np.pi * np.arange(D // 2 + 1) / L
    ell = k**2 - k**4
    E = np.exp(dt * ell)
    E2 = np.exp(0.5 * dt * ell)
    r = contour_radius * np.exp(1j * np.pi * (np.arange(contour_points) + 0.5) / contour_points)
    LR = dt * ell[:, None] + r[None, :]
    eLR = np.exp(LR)
    Q = dt * np.mean((np.exp(LR / 2.0) - 1.0) / LR, axis=1).real
    f1 = dt * np.mean((-4.0 - LR + eLR * (4.0 - 3.0 * LR + LR**2)) / LR**3, axis=1).real
    f2 = dt * np.mean((2.0 + LR + eLR * (LR - 2.0)) / LR**3, axis=1).real
    f3 = dt * np.mean((-4.0 - 3.0 * LR - LR**2 + eLR * (4.0 - LR)) / LR**3, axis=1).real
    ik = 1j * k
    dealias = np.arange(D // 2 + 1) <= D // 3
    return ETDRK4Coeffs(E=E, E2=E2, Q=Q, f1=f1, f2=f2, f3=f3, ik=ik, dealias=dealias)


def _ks_shape(c, x):
    """Broadcast coefficient arrays against single states or member batches."""
    if x.ndim == 1:
        return c
    return c[:, None]


def _ks_nonlinear(v_hat, coeffs, shape_ref):
    u = np.fft.irfft(v_hat, axis=0)
    w = np.fft.rfft(u * u, axis=0)
    return -0.5 * _ks_shape(coeffs.ik, shape_ref) * _ks_shape(coeffs.dealias, shape_ref) * w


def ks_step(x, coeffs):
    """One ETDRK4 step of the KS equation; input and output are real grid values."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise BlowupError("non-finite KS state")
    E = _ks_shape(coeffs.E, x)
    E2 = _ks_shape(coeffs.E2, x)
    Q = _ks_shape(coeffs.Q, x)
    v = np.fft.rfft(x, axis=0)
    Nv = _ks_nonlinear(v, coeffs, x)
    a = E2 * v + Q * Nv
    Na = _ks_nonlinear(a, coeffs, x)
    b = E2 * v + Q * Na
    Nb = _ks_nonlinear(b, coeffs, x)
    c = E2 * a + Q * (2.0 * Nb - Nv)
    Nc = _ks_nonlinear(c, coeffs, x)
    v_next = E * v + _ks_shape(coeffs.f1, x) * Nv + 2.0 * _ks_shape(coeffs.f2, x) * (Na + Nb) \
        + _ks_shape(coeffs.f3, x) * Nc
    out = np.fft.irfft(v_next, axis=0)
    if not np.all(np.isfinite(out)):
        raise BlowupError("KS step produced non-finite values")
    return out


def ks_step_jvp(x, W, coeffs):
    """One ETDRK4 step together with tangent propagation.

    ``W`` holds tangent vectors in columns (shape (D, k)); the tangent of the
    quadratic term u u_x is (u du)_x, applied at every stage.
    """
    x = np.asarray(x, dtype=float)
    W = np.asarray(W, dtype=float)
    E, E2, Q = coeffs.E[:, None], coeffs.E2[:, None], coeffs.Q[:, None]
    ikm = (coeffs.ik * coeffs.dealias)[:, None]

    v = np.fft.rfft(x, axis=0)[:, None] if x.ndim == 1 else np.fft.rfft(x, axis=0)
    dv = np.fft.rfft(W, axis=0)

    def nl(vh):
        u = np.fft.irfft(vh[:, 0])
        return -0.5 * ikm * np.fft.rfft(u * u)[:, None], u

    def dnl(u, dvh):
        du = np.fft.irfft(dvh, axis=0)
        return -ikm * np.fft.rfft(u[:, None] * du, axis=0)

    Nv, u0 = nl(v)
    dNv = dnl(u0, dv)
    a = E2 * v + Q * Nv
    da = E2 * dv + Q * dNv
    Na, ua = nl(a)
    dNa = dnl(ua, da)
    b = E2 * v + Q * Na
    db = E2 * dv + Q * dNa
    Nb, ub = nl(b)
    dNb = dnl(ub, db)
    c = E2 * a + Q * (2.0 * Nb - Nv)
    dc = E2 * da + Q * (2.0 * dNb - dNv)
    Nc, uc = nl(c)
    dNc = dnl(uc, dc)

    f1, f2, f3 = coeffs.f1[:, None], coeffs.f2[:, None], coeffs.f3[:, None]
    v_next = E * v + f1 * Nv + 2.0 * f2 * (Na + Nb) + f3 * Nc
    dv_next = E * dv + f1 * dNv + 2.0 * f2 * (dNa + dNb) + f3 * dNc
    x_next = np.fft.irfft(v_next[:, 0])
    W_next = np.fft.irfft(dv_next, axis=0)
    return x_next, W_next


# ---------------------------------------------------------------------------
# Model types
# ---------------------------------------------------------------------------


def _check_psd(M, name):
    """Validate symmetry and positive semidefiniteness (degenerate, exactly
    singular covariances are allowed for noiseless test configurations;
    operations that need a factorization raise on them at use)."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ModelError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-10):
        raise ModelError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) < -1e-10:
        raise ModelError(f"{name} must be positive semidefinite")
    return 0.5 * (M + M.T)


def psd_factor(M):
    """Factor F with F F^T = M for sampling: Cholesky when SPD, otherwise an
    eigenvalue square root with tiny negatives clipped to zero."""
    M = np.asarray(M, dtype=float)
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class LinearDynamics:
    """Linear forecast map x -> A x with process noise covariance Sigma."""

    A: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Sigma", _check_psd(self.Sigma, "Sigma"))
        if self.Sigma.shape[0] != A.shape[0]:
            raise ModelError("A and Sigma dimensions disagree")
        if np.max(np.abs(np.linalg.eigvals(A))) >= 1.0:
            raise ModelError("linear dynamics must have spectral radius < 1")

    @property
    def dim(self):
        return self.A.shape[0]

    def step(self, x):
        return self.A @ x

    def jvp(self, x, W):
        return self.A @ x, self.A @ W

    def jacobian(self, x):
        return self.A

    def jacobian_dirderivs(self, x):
        d = self.dim
        return self.A @ x, self.A, np.zeros((d, d, d))


@dataclass(frozen=True)
class Lorenz96Dynamics:
    """Lorenz '96 ring model; the step map is one RK4 step of length dt."""

    D: int
    F: float
    dt: float
    Sigma: np.ndarray
    classic: bool = False

    def __post_init__(self):
        if self.D < 4:
            raise ModelError(f"Lorenz '96 needs D >= 4, got {self.D}")
        if self.dt <= 0:
            raise ModelError("dt must be positive")
        object.__setattr__(self, "Sigma", _check_psd(self.Sigma, "Sigma"))
        if self.Sigma.shape[0] != self.D:
            raise ModelError("Sigma dimension disagrees with D")

    @property
    def dim(self):
        return self.D

    def step(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        if x.ndim == 1:
            return kernels.l96_rk4_single(x, float(self.F), self.dt, self.classic)
        return kernels.l96_rk4_batch(x, float(self.F), self.dt, self.classic)

    def jvp(self, x, W):
        x = np.ascontiguousarray(x, dtype=float)
        W = np.ascontiguousarray(W, dtype=float)
        return kernels.l96_rk4_jvp(x, W, float(self.F), self.dt, self.classic)

    def jacobian(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        _, J = kernels.l96_rk4_jacobian(x, float(self.F), self.dt, self.classic)
        return J

    def jacobian_dirderivs(self, x):
        """Step value, step Jacobian J, and T with T[k] = dJ/dx_k."""
        x = np.ascontiguousarray(x, dtype=float)
        return kernels.l96_rk4_jac_dirderivs(x, float(self.F), self.dt, self.classic)


@dataclass(frozen=True)
class KSDynamics:
    """Kuramoto-Sivashinsky on a circle of length L with D grid points.

    The assimilation step map applies ``steps_per_obs`` ETDRK4 substeps.
    """

    L: float
    D: int
    dt: float
    Sigma: np.ndarray
    steps_per_obs: int = 5
    coeffs: ETDRK4Coeffs = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "Sigma", _check_psd(self.Sigma, "Sigma"))
        if self.Sigma.shape[0] != self.D:
            raise ModelError("Sigma dimension disagrees with D")
        if self.steps_per_obs < 1:
            raise ModelError("steps_per_obs must be >= 1")
        if self.coeffs is None:
            object.__setattr__(self, "coeffs", ks_precompute(self.L, self.D, self.dt))

    @property
    def dim(self):
        return self.D

    def step(self, x):
        for _ in range(self.steps_per_obs):
            x = ks_step(x, self.coeffs)
        return x

    def jvp(self, x, W):
        for _ in range(self.steps_per_obs):
            x, W = ks_step_jvp(x, W, self.coeffs)
        return x, W

    def jacobian(self, x):
        raise UnsupportedOperationError("no dense Jacobian for the KS step map")

    def jacobian_dirderivs(self, x):
        raise UnsupportedOperationError("no dense Jacobian for the KS step map")


def dynamics_jacobian(model, x):
    """Jacobian of the model's full step map evaluated at x."""
    return model.jacobian(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ObservationModel:
    """Linear observation map y = H x + eta, eta ~ N(0, Gamma)."""

    H: np.ndarray
    Gamma: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "Gamma", _check_psd(self.Gamma, "Gamma"))
        p, d = H.shape
        if self.Gamma.shape[0] != p:
            raise ModelError("Gamma dimension disagrees with H rows")
        if np.linalg.matrix_rank(H) < p:
            raise ModelError("H must have full row rank")
        try:
            chol = np.linalg.cholesky(self.Gamma)
            logdet = 2.0 * np.sum(np.log(np.diag(chol)))
            log_norm = 0.5 * (p * np.log(2.0 * np.pi) + logdet)
        except np.linalg.LinAlgError:
            chol, log_norm = None, None  # singular Gamma: sampling-only model
        object.__setattr__(self, "chol_gamma", chol)
        object.__setattr__(self, "log_norm_const", log_norm)

    @property
    def p(self):
        return self.H.shape[0]

    @property
    def dim(self):
        return self.H.shape[1]


def identity_obs(dim, noise=1.0):
    """Full observation of the state with isotropic noise variance."""
    return ObservationModel(H=np.eye(dim), Gamma=noise * np.eye(dim))


def every_other_obs(dim, noise=1.0):
    """Observe every second state variable (rows 0, 2, 4, ... of the identity)."""
    H = np.eye(dim)[0::2]
    return ObservationModel(H=H, Gamma=noise * np.eye(H.shape[0]))
