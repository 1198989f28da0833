"""Filter families: exact Kalman, steady-state Kalman, fixed-gain Gaussian
filters (linear and extended), and the square-root EnKF with inflation and
localization.

All operations are pure: they take states/ensembles and return new ones.
Covariances are re-symmetrized after every update.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .exceptions import (
    BlowupError,
    ConvergenceError,
    DecompositionError,
    FilterDivergenceError,
)

__all__ = [
    "GaussianState",
    "GainParams",
    "InflLocParams",
    "Ensemble",
    "kalman_predict",
    "kalman_analysis",
    "steady_state_kalman",
    "fixed_gain_step",
    "extended_fixed_gain_step",
    "localization_matrix",
    "enkf_step",
]


def _sym(C):
    return 0.5 * (C + C.T)


@dataclass(frozen=True)
class GaussianState:
    """Gaussian filter belief (mean, covariance)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        C = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", _sym(C))

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class GainParams:
    """Frozen gain matrix K (d x p)."""

    K: np.ndarray

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        if not np.all(np.isfinite(K)):
            raise ValueError("gain matrix must be finite")
        object.__setattr__(self, "K", K)


@dataclass(frozen=True)
class InflLocParams:
    """Inflation factor and localization length scale."""

    lam: float
    ell: float

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"inflation must be >= 0, got {self.lam}")
        if not self.ell > 0:
            raise ValueError(f"localization length must be > 0, got {self.ell}")


@dataclass(frozen=True)
class Ensemble:
    """d x N matrix whose columns are ensemble members."""

    members: np.ndarray

    def __post_init__(self):
        E = np.asarray(self.members, dtype=float)
        if E.ndim != 2 or E.shape[1] < 2:
            raise ValueError("ensemble needs at least two member columns")
        if not np.all(np.isfinite(E)):
            raise BlowupError("ensemble contains non-finite members")
        object.__setattr__(self, "members", E)

    @property
    def dim(self):
        return self.members.shape[0]

    @property
    def size(self):
        return self.members.shape[1]

    @property
    def mean(self):
        return self.members.mean(axis=1)


def _as_gain(K):
    return K.K if isinstance(K, GainParams) else np.atleast_2d(np.asarray(K, dtype=float))


def _as_infl_loc(params):
    if isinstance(params, InflLocParams):
        return params.lam, params.ell
    lam, ell = np.asarray(params, dtype=float).ravel()
    return float(lam), float(ell)


# ---------------------------------------------------------------------------
# Kalman filter
# ---------------------------------------------------------------------------


def kalman_predict(state, dyn):
    """Prediction step: mean A m, covariance A C A^T + Sigma."""
    A = dyn.A
    return GaussianState(mean=A @ state.mean, cov=A @ state.cov @ A.T + dyn.Sigma)


def _gain_from_forecast(C_hat, obs):
    S = obs.H @ C_hat @ obs.H.T + obs.Gamma
    try:
        factor = cho_factor(_sym(S), lower=True)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"innovation covariance is not SPD: {exc}") from exc
    return cho_solve(factor, obs.H @ C_hat).T, factor


def kalman_analysis(forecast, y, obs):
    """Bayes update of a Gaussian forecast; returns the posterior and the gain."""
    H = obs.H
    K, _ = _gain_from_forecast(forecast.cov, obs)
    mean = forecast.mean + K @ (y - H @ forecast.mean)
    cov = (np.eye(forecast.dim) - K @ H) @ forecast.cov
    return GaussianState(mean=mean, cov=cov), K


def steady_state_kalman(dyn, obs, tol=1e-13, max_iter=100_000):
    """Steady-state forecast covariance, gain, and analysis covariance.

    Iterates C_hat <- A (I - K H) C_hat A^T + Sigma with K recomputed from
    C_hat each sweep, starting from C_hat = Sigma, until successive iterates
    differ by less than ``tol`` in Frobenius norm.
    """
    A, H = dyn.A, obs.H
    C_hat = np.array(dyn.Sigma, dtype=float)
    history = []
    for _ in range(max_iter):
        K, _ = _gain_from_forecast(C_hat, obs)
        C_new = _sym(A @ (C_hat - K @ (H @ C_hat)) @ A.T + dyn.Sigma)
        resid = float(np.linalg.norm(C_new - C_hat))
        history.append(resid)
        C_hat = C_new
        if resid < tol:
            K, _ = _gain_from_forecast(C_hat, obs)
            C_steady = _sym((np.eye(dyn.dim) - K @ H) @ C_hat)
            return C_hat, K, C_steady
    raise ConvergenceError(
        f"steady-state iteration did not reach tol={tol} in {max_iter} sweeps "
        f"(last residual {history[-1]:.3e})",
        residual=history[-1],
        history=history,
    )


# ---------------------------------------------------------------------------
# Fixed-gain Gaussian filters
# ---------------------------------------------------------------------------


def _gain_analysis(forecast, K, y, obs):
    """Mean update with frozen gain; covariance by the Joseph formula, which
    is valid (and keeps the covariance PSD) for arbitrary gains."""
    H, Gamma = obs.H, obs.Gamma
    M = np.eye(forecast.dim) - K @ H
    mean = forecast.mean + K @ (y - H @ forecast.mean)
    cov = M @ forecast.cov @ M.T + K @ Gamma @ K.T
    return GaussianState(mean=mean, cov=cov)


def fixed_gain_step(state, K, y, dyn, obs):
    """One prediction/analysis cycle of the frozen-gain linear filter.

    Returns the pair (forecast, analysis); the variational objective needs
    both distributions.
    """
    K = _as_gain(K)
    forecast = kalman_predict(state, dyn)
    return forecast, _gain_analysis(forecast, K, y, obs)


def extended_fixed_gain_step(state, K, y, dyn, obs):
    """Frozen-gain filter for nonlinear dynamics: the mean moves through the
    full step map, the covariance through its Jacobian at the current mean."""
    K = _as_gain(K)
    J = dyn.jacobian(state.mean)
    m_hat = dyn.step(state.mean)
    if not np.all(np.isfinite(m_hat)):
        raise BlowupError("non-finite forecast mean in extended fixed-gain step")
    forecast = GaussianState(mean=m_hat, cov=J @ state.cov @ J.T + dyn.Sigma)
    return forecast, _gain_analysis(forecast, K, y, obs)


# ---------------------------------------------------------------------------
# Square-root EnKF with inflation and localization
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _cyclic_sq_distances(dim, scale):
    i = np.arange(dim)
    D = np.minimum(np.abs(i[:, None] - i[None, :]), dim - np.abs(i[:, None] - i[None, :]))
    D = D.astype(float) * scale
    return D * D


def localization_matrix(dim, ell, scale=1.0):
    """Gaspari-Cohn-style Gaussian taper L_ik = exp(-D_ik^2 / ell) on a ring.

    Distances are cyclic index offsets by default; ``scale`` converts them to
    physical units (e.g. L/D for a uniform periodic grid).
    """
    if not ell > 0:
        raise ValueError(f"localization length must be > 0, got {ell}")
    return np.exp(-_cyclic_sq_distances(int(dim), float(scale)) / float(ell))


def principal_sqrt_ikh(C_hat, chol_innov, obs, tol=1e-8):
    """Principal square root of M = I - K H for K = C_hat H^T S^{-1}.

    M is similar to the symmetric PSD matrix N = I - R^T H^T S^{-1} H R via
    the Cholesky factor R of C_hat (M = R N R^{-1}), so the root is computed
    from the eigendecomposition of N.  Eigenvalues slightly below zero (above
    ``-tol``) are clamped; anything lower means the transform left its domain.

    Returns (sqrt_M, context) where the context carries the pieces the
    forward-sensitivity pass reuses.
    """
    d = C_hat.shape[0]
    try:
        R = np.linalg.cholesky(C_hat)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"forecast covariance is not SPD: {exc}") from exc
    HR = obs.H @ R
    W = cho_solve(chol_innov, HR)  # S^{-1} H R
    Nmat = _sym(np.eye(d) - HR.T @ W)
    vals, vecs = np.linalg.eigh(Nmat)
    if np.min(vals) < -tol:
        raise FilterDivergenceError(
            f"I - KH has eigenvalue {np.min(vals):.3e} below -{tol:.0e}; filter diverged"
        )
    vals = np.clip(vals, 0.0, None)
    roots = np.sqrt(vals)
    RV = R @ vecs
    VtRinv = solve_triangular(R, vecs, lower=True, trans="T").T  # V^T R^{-1}
    sqrt_M = (RV * roots) @ VtRinv
    ctx = {"R": R, "vecs": vecs, "roots": roots, "RV": RV, "VtRinv": VtRinv}
    return sqrt_M, ctx


def _enkf_analysis_from_propagated(Et, y, params, dyn, obs, loc_scale=1.0,
                                   single_inflation=False, stochastic_noise=False):
    """Square-root EnKF analysis from already-propagated members, returning
    all intermediates (for the objective and its sensitivities)."""
    lam, ell = _as_infl_loc(params)
    Et = np.asarray(Et, dtype=float)
    d, N = Et.shape
    H, Gamma = obs.H, obs.Gamma

    m_hat = Et.mean(axis=1)
    A_raw = Et - m_hat[:, None]
    A_infl = lam * A_raw
    E_fore = m_hat[:, None] + A_infl

    S_samp = (A_infl @ A_infl.T) / (N - 1)
    L = localization_matrix(d, ell, scale=loc_scale)
    C_hat = _sym(L * S_samp if stochastic_noise else L * S_samp + dyn.Sigma)

    innov_cov = _sym(H @ C_hat @ H.T + Gamma)
    try:
        chol_innov = cho_factor(innov_cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"innovation covariance is not SPD: {exc}") from exc
    K = cho_solve(chol_innov, H @ C_hat).T

    r = y - H @ m_hat
    m = m_hat + K @ r

    sqrt_M, sqrt_ctx = principal_sqrt_ikh(C_hat, chol_innov, obs)
    post_anoms = sqrt_M @ A_infl
    E_anal = m[:, None] + (post_anoms if single_inflation else lam * post_anoms)

    return {
        "m_hat": m_hat,
        "A_raw": A_raw,
        "A_infl": A_infl,
        "E_fore": E_fore,
        "S_samp": S_samp,
        "L": L,
        "C_hat": C_hat,
        "chol_innov": chol_innov,
        "K": K,
        "innovation": r,
        "m": m,
        "sqrt_M": sqrt_M,
        "sqrt_ctx": sqrt_ctx,
        "post_anoms": post_anoms,
        "E_anal": E_anal,
        "lam": lam,
        "ell": ell,
    }


def enkf_step(ens, y, params, dyn, obs, rng=None, loc_scale=1.0,
              single_inflation=False, stochastic_noise=False):
    """One square-root EnKF cycle.

    Members move through the deterministic step map; process noise enters the
    gain through C_hat = L o S + Sigma rather than by perturbing members
    (``stochastic_noise=True`` switches to member perturbation, in which case
    Sigma is not added again).  Inflation scales forecast anomalies before the
    gain computation and appears a second time in the anomaly update, matching
    the square-root scheme as written; ``single_inflation=True`` drops the
    second application.

    Returns (forecast_ensemble, analysis_ensemble), the forecast being the
    post-inflation ensemble the objective's divergence term uses.
    """
    E = ens.members if isinstance(ens, Ensemble) else np.asarray(ens, dtype=float)
    d, N = E.shape
    Et = dyn.step(E)
    if stochastic_noise:
        if rng is None:
            raise ValueError("stochastic process-noise mode needs an rng")
        from .models import psd_factor

        Et = Et + psd_factor(dyn.Sigma) @ rng.standard_normal((d, N))
    if not np.all(np.isfinite(Et)):
        raise BlowupError("ensemble propagation produced non-finite members")
    out = _enkf_analysis_from_propagated(
        Et, y, params, dyn, obs, loc_scale=loc_scale,
        single_inflation=single_inflation, stochastic_noise=stochastic_noise,
    )
    return Ensemble(out["E_fore"]), Ensemble(out["E_anal"])
