"""Forward-mode derivatives of the variational objectives.

Tangents of the filter state — (mean, covariance) pairs for the Gaussian
families, member matrices for the EnKF — are propagated alongside the filter
recursion, one tangent per parameter component, and contracted against the
derivative weights of the per-step KL and likelihood terms.  Every derivative
mirrors the exact arithmetic of :mod:`varfilt.objective`, including the
shared Monte Carlo draws, so the result matches central finite differences
of the objective (the test suite enforces the agreement).

For the frozen-gain filter on stable linear dynamics the covariance
recursion is data-independent and contracts to a fixed point; once the
covariance and its tangents stop moving (relative change below
``FREEZE_TOL`` over ``FREEZE_RUN`` consecutive steps, verified on the
tangents directly) the covariance-tangent updates are frozen and only the
cheap mean-tangent work remains.  That is what keeps full-size gain training
in the minutes range; the approximation it introduces sits at the level of
the last unconverged digit (~FREEZE_TOL relative), five orders of magnitude
below the finite-difference agreement tolerance.
"""

import numpy as np
from scipy.linalg import cho_solve, solve_sylvester, solve_triangular

from . import rng
from .exceptions import UnsupportedOperationError
from .filters import (
    GaussianState,
    _cyclic_sq_distances,
    _enkf_analysis_from_propagated,
    _gain_analysis,
)
from .kernels import batched_similarity
from .models import LinearDynamics, psd_factor

FREEZE_TOL = 1e-9
FREEZE_RUN = 3

__all__ = [
    "gain_objective_gradient",
    "enkf_objective_gradient",
    "gain_online_step_gradient",
    "enkf_online_step_gradient",
]


# ---------------------------------------------------------------------------
# Derivative weights of the per-step cost terms
# ---------------------------------------------------------------------------


def _phi_mask(M):
    """Adjoint of the Cholesky-derivative projector: lower triangle, half diagonal."""
    out = np.tril(M)
    np.fill_diagonal(out, 0.5 * np.diag(M))
    return out


def _spd_inverse(L):
    return cho_solve((L, True), np.eye(L.shape[0]))


def _tri_sandwich(L, Q):
    """L^{-T} Q L^{-1} for lower-triangular L."""
    X = solve_triangular(L, Q, lower=True, trans="T")
    return solve_triangular(L, X.T, lower=True, trans="T").T


def _kl_weights(m1, C1, m2, C2):
    """Pieces of dKL(N1 || N2) viewed as a function of (m1, C1, m2, C2):

        dKL = <Wf_cov - (1/2) u u^T, dC2> + <Wa, dC1> + u . (dm2 - dm1)

    with u = C2^{-1} (m2 - m1).  Returns (Wf_cov, Wa, u, L1) where L1 is the
    Cholesky factor of C1 (reused by the likelihood-term weights).
    """
    L1 = np.linalg.cholesky(C1)
    L2 = np.linalg.cholesky(C2)
    C1inv = _spd_inverse(L1)
    C2inv = _spd_inverse(L2)
    u = C2inv @ (m2 - m1)
    Wf_cov = 0.5 * (C2inv - C2inv @ C1 @ C2inv)
    Wa = 0.5 * (C2inv - C1inv)
    return Wf_cov, Wa, u, L1


def _nll_weights_gaussian_mc(m, L1, y, obs, z):
    """Weights of the Monte Carlo expected NLL of a Gaussian analysis, with
    the covariance dependence resolved through the Cholesky derivative:
    d(nll) = vec . dm + <W, dC>."""
    H = obs.H
    V = m[:, None] + L1 @ z.T
    R = y[:, None] - H @ V
    Gmat = H.T @ cho_solve((obs.chol_gamma, True), R)
    vec = -Gmat.mean(axis=1)
    P = (Gmat @ z) / z.shape[0]
    W = -_tri_sandwich(L1, _phi_mask(L1.T @ P))
    return vec, 0.5 * (W + W.T)


def _nll_weights_gaussian_analytic(m, y, obs):
    H = obs.H
    r = y - H @ m
    vec = -H.T @ cho_solve((obs.chol_gamma, True), r)
    W = 0.5 * (H.T @ cho_solve((obs.chol_gamma, True), H))
    return vec, W


def _nll_grad_ensemble(E_anal, dE_anal, y, obs):
    """Derivative of the member-averaged NLL along member tangents."""
    R = y[:, None] - obs.H @ E_anal
    Gmat = obs.H.T @ cho_solve((obs.chol_gamma, True), R)
    N = E_anal.shape[1]
    return np.array([-float(np.sum(Gmat * dE)) / N for dE in dE_anal])


def _contract(DC, W):
    """<W, DC[b]> for a stack of covariance tangents."""
    return DC.reshape(DC.shape[0], -1) @ W.ravel()


def _quad(DC, u):
    """u^T DC[b] u for a stack of covariance tangents."""
    B, d, _ = DC.shape
    return (DC.reshape(B * d, d) @ u).reshape(B, d) @ u


# ---------------------------------------------------------------------------
# Gain families: theta = K (d x p), one tangent per entry, b = a * p + beta
# ---------------------------------------------------------------------------


def _rank_sources(K, M, C_hat, obs):
    """Columns u_b of the rank-one analysis-covariance sources: parameter
    direction dK = e_a e_b^T adds e_a u_b^T + u_b e_a^T to the covariance
    tangent.  Vanishes at the exact Kalman gain (stationarity of the Joseph
    update at the optimum)."""
    return -M @ C_hat @ obs.H.T + K @ obs.Gamma


def _add_rank_sources(DC, DM, U, r, d, p):
    idx = np.arange(d)
    DC4 = DC.reshape(d, p, d, d)
    DC4[idx, :, idx, :] += U.T[None, :, :]
    DC4[idx, :, :, idx] += U.T[None, :, :]
    DM3 = DM.reshape(d, p, d)
    DM3[idx, :, idx] += r[None, :]


def _gain_step_weights(forecast, analysis, y, obs, cfg, step):
    Wf_cov, Wa, u, L1 = _kl_weights(analysis.mean, analysis.cov, forecast.mean, forecast.cov)
    if cfg.nll_mode == "analytic":
        nvec, Wn = _nll_weights_gaussian_analytic(analysis.mean, y, obs)
    else:
        z = rng.mc_normal_draws(cfg.seed, step, cfg.mc_samples, analysis.dim)
        nvec, Wn = _nll_weights_gaussian_mc(analysis.mean, L1, y, obs, z)
    return Wf_cov, Wa, u, nvec, Wn


def _linear_gain_gradient(family, K, truth, cfg):
    d, p = family.theta_shape
    B = d * p
    obs = family.obs
    H, A = obs.H, family.dyn.A
    M = np.eye(d) - K @ H
    G = M @ A

    state = family.init_state(cfg)
    DM = np.zeros((B, d))
    DC = np.zeros((B, d, d))
    grad = np.zeros(B)
    idx = np.arange(d)

    frozen = False
    run = 0
    prev_cov = state.cov
    DC_snapshot = None
    DCh_frozen = fore_const = anal_const = None

    for j in range(truth.horizon):
        y = truth.observations[j]
        forecast = family.forecast_part(state)
        analysis = _gain_analysis(forecast, K, y, obs)
        Wf_cov, Wa, u, nvec, Wn = _gain_step_weights(forecast, analysis, y, obs, cfg, j + 1)
        r = y - H @ forecast.mean

        if not frozen:
            Wf = Wf_cov - 0.5 * np.outer(u, u)
            grad += _contract(DC, A.T @ Wf @ A)
            grad += DM @ (A.T @ u)
            DM = DM @ G.T
            DC = batched_similarity(G, DC)
            U = _rank_sources(K, M, forecast.cov, obs)
            _add_rank_sources(DC, DM, U, r, d, p)
            grad += _contract(DC, Wa + Wn)
            grad += DM @ (nvec - u)

            rel = np.linalg.norm(analysis.cov - prev_cov) / (1.0 + np.linalg.norm(analysis.cov))
            run = run + 1 if rel < FREEZE_TOL else 0
            prev_cov = analysis.cov
            if run >= FREEZE_RUN:
                if DC_snapshot is not None and (
                    np.linalg.norm(DC - DC_snapshot) <= 100.0 * FREEZE_TOL * (1.0 + np.linalg.norm(DC))
                ):
                    frozen = True
                    DCh_frozen = batched_similarity(A, DC)
                    fore_const = _contract(DCh_frozen, Wf_cov)
                    anal_const = _contract(DC, Wa)
                else:
                    DC_snapshot = DC.copy()
        else:
            grad += fore_const - 0.5 * _quad(DCh_frozen, u)
            grad += DM @ (A.T @ u)
            DM = DM @ G.T
            DM3 = DM.reshape(d, p, d)
            DM3[idx, :, idx] += r[None, :]
            grad += anal_const + _contract(DC, Wn)
            grad += DM @ (nvec - u)

        state = analysis
    return grad.reshape(d, p)


def _extended_gain_gradient(family, K, truth, cfg):
    d, p = family.theta_shape
    B = d * p
    obs = family.obs
    H = obs.H
    Sigma = family.dyn.Sigma
    M = np.eye(d) - K @ H

    state = family.init_state(cfg)
    DM = np.zeros((B, d))
    DC = np.zeros((B, d, d))
    grad = np.zeros(B)

    for j in range(truth.horizon):
        y = truth.observations[j]
        m_hat, Jj, Tj = family.dyn.jacobian_dirderivs(state.mean)
        forecast = GaussianState(mean=m_hat, cov=Jj @ state.cov @ Jj.T + Sigma)
        analysis = _gain_analysis(forecast, K, y, obs)
        Wf_cov, Wa, u, nvec, Wn = _gain_step_weights(forecast, analysis, y, obs, cfg, j + 1)
        r = y - H @ m_hat

        # forecast tangents: dm_hat = J dm, dC_hat = dJ C J^T + J dC J^T + (dJ C J^T)^T
        dJ = (DM @ Tj.reshape(d, d * d)).reshape(B, d, d)
        P1 = np.matmul(dJ, state.cov @ Jj.T)
        DCh = P1 + P1.transpose(0, 2, 1) + batched_similarity(Jj, DC)
        DMh = DM @ Jj.T

        Wf = Wf_cov - 0.5 * np.outer(u, u)
        grad += _contract(DCh, Wf)
        grad += DMh @ u

        DM = DMh @ M.T
        DC = batched_similarity(M, DCh)
        U = _rank_sources(K, M, forecast.cov, obs)
        _add_rank_sources(DC, DM, U, r, d, p)
        grad += _contract(DC, Wa + Wn)
        grad += DM @ (nvec - u)

        state = analysis
    return grad.reshape(d, p)


def gain_objective_gradient(family, K, truth, cfg):
    """Gradient of the offline objective with respect to a frozen gain."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if family.kind == "linear_gain":
        return _linear_gain_gradient(family, K, truth, cfg)
    if family.kind == "extended_gain":
        return _extended_gain_gradient(family, K, truth, cfg)
    raise UnsupportedOperationError(f"no gain gradient for family {family.kind!r}")


def gain_online_step_gradient(family, frozen_forecast, K, y, cfg, step):
    """Gradient of the single-step online cost; the forecast is frozen, so
    only the analysis-map dependence on K contributes."""
    d, p = family.theta_shape
    B = d * p
    obs = family.obs
    K = np.atleast_2d(np.asarray(K, dtype=float))
    M = np.eye(d) - K @ obs.H
    forecast = frozen_forecast
    analysis = _gain_analysis(forecast, K, y, obs)
    Wf_cov, Wa, u, nvec, Wn = _gain_step_weights(forecast, analysis, y, obs, cfg, step)
    r = y - obs.H @ forecast.mean

    DM = np.zeros((B, d))
    DC = np.zeros((B, d, d))
    U = _rank_sources(K, M, forecast.cov, obs)
    _add_rank_sources(DC, DM, U, r, d, p)
    grad = _contract(DC, Wa + Wn) + DM @ (nvec - u)
    return grad.reshape(d, p)


# ---------------------------------------------------------------------------
# EnKF family: theta = (inflation, localization length), two tangents
# ---------------------------------------------------------------------------


def _propagate_members_with_tangents(family, E, DE, cfg, step):
    """Advance members and their two tangent stacks through the dynamics."""
    dyn = family.dyn
    if isinstance(dyn, LinearDynamics):
        Et = dyn.A @ E
        DEt = np.matmul(dyn.A, DE)
    else:
        d, N = E.shape
        Et = np.empty_like(E)
        DEt = np.empty_like(DE)
        for n in range(N):
            W = DE[:, :, n].T  # (d, 2)
            xn, Wn = dyn.jvp(E[:, n], W)
            Et[:, n] = xn
            DEt[:, :, n] = Wn.T
    if family.stochastic_noise:
        seed = 0 if cfg is None else cfg.seed
        gen = rng.substream(seed, rng.MEMBER_NOISE, step)
        Et = Et + psd_factor(dyn.Sigma) @ gen.standard_normal(Et.shape)
    return Et, DEt


def _projection_tangent(E, dE_stack, mle):
    """Sample mean/covariance of E and their tangents along member tangents,
    mirroring the Gaussian projection arithmetic."""
    N = E.shape[1]
    denom = N if mle else N - 1
    m = E.mean(axis=1)
    Am = E - m[:, None]
    C = (Am @ Am.T) / denom
    dms, dCs = [], []
    for dE in dE_stack:
        dm = dE.mean(axis=1)
        dA = dE - dm[:, None]
        dC = (dA @ Am.T + Am @ dA.T) / denom
        dms.append(dm)
        dCs.append(dC)
    return m, C, np.array(dms), np.array(dCs)


def _enkf_step_tangents(family, Et, DEt, theta, y, cfg, step):
    """Analysis update of members and tangents, plus the step-cost derivative.

    Returns (E_anal, dE_anal, dcost) where dcost is the 2-vector derivative
    of (kl + nll) at this step.
    """
    obs = family.obs
    H = obs.H
    lam, theta1 = float(theta[0]), float(theta[1])
    ell = family.kernel_length(theta1)
    out = _enkf_analysis_from_propagated(
        Et, y, (lam, ell), family.dyn, obs, loc_scale=family.loc_scale,
        single_inflation=family.single_inflation, stochastic_noise=family.stochastic_noise,
    )
    A_raw, A_infl = out["A_raw"], out["A_infl"]
    S_samp, L, C_hat = out["S_samp"], out["L"], out["C_hat"]
    chol_innov, K, r, m = out["chol_innov"], out["K"], out["innovation"], out["m"]
    sqrt_M, E_fore, E_anal = out["sqrt_M"], out["E_fore"], out["E_anal"]
    post_anoms = out["post_anoms"]
    d, N = Et.shape
    dlam = (1.0, 0.0)

    D2 = _cyclic_sq_distances(d, family.loc_scale)
    dell_dtheta = 2.0 * theta1 if family.radius_loc else 1.0
    dL_ell = (L * D2 / ell**2) * dell_dtheta

    dm_hat = DEt.mean(axis=2)
    dE_anal = np.empty((2, d, N))
    dE_fore = np.empty((2, d, N))
    for t in range(2):
        dA_raw = DEt[t] - dm_hat[t][:, None]
        dA_infl = dlam[t] * A_raw + lam * dA_raw
        dE_fore[t] = dm_hat[t][:, None] + dA_infl
        dS = (dA_infl @ A_infl.T + A_infl @ dA_infl.T) / (N - 1)
        dL = dL_ell if t == 1 else 0.0
        dC_hat = dL * S_samp + L * dS
        dInnov = H @ dC_hat @ H.T
        dK = cho_solve(chol_innov, (dC_hat @ H.T - K @ dInnov).T).T
        dr = -H @ dm_hat[t]
        dm = dm_hat[t] + dK @ r + K @ dr
        dM = -dK @ H
        dSqm = solve_sylvester(sqrt_M, sqrt_M, dM)
        dpost = dSqm @ A_infl + sqrt_M @ dA_infl
        if family.single_inflation:
            danoms = dpost
        else:
            danoms = dlam[t] * post_anoms + lam * dpost
        dE_anal[t] = dm[:, None] + danoms

    # derivative of the projected, shrunk KL term plus the ensemble NLL term
    gma = cfg.shrinkage_gamma
    ma, Ca, dma, dCa = _projection_tangent(E_anal, dE_anal, cfg.mle_projection)
    mf, Cf, dmf, dCf = _projection_tangent(E_fore, dE_fore, cfg.mle_projection)
    Ca_s = (1.0 - gma) * Ca + gma * np.eye(d)
    Cf_s = (1.0 - gma) * Cf + gma * np.eye(d)
    Wf_cov, Wa, u, _ = _kl_weights(ma, Ca_s, mf, Cf_s)
    Wf = Wf_cov - 0.5 * np.outer(u, u)
    dkl = np.array([
        float(np.sum(Wf * ((1.0 - gma) * dCf[t])) + np.sum(Wa * ((1.0 - gma) * dCa[t]))
              + u @ (dmf[t] - dma[t]))
        for t in range(2)
    ])
    dnll = _nll_grad_ensemble(E_anal, dE_anal, y, obs)
    return E_anal, dE_anal, dkl + dnll


def enkf_objective_gradient(family, theta, truth, cfg):
    """Gradient of the offline objective with respect to (inflation, length)."""
    theta = np.asarray(theta, dtype=float).ravel()
    ens = family.init_state(cfg)
    E = ens.members
    DE = np.zeros((2,) + E.shape)
    grad = np.zeros(2)
    for j in range(truth.horizon):
        y = truth.observations[j]
        Et, DEt = _propagate_members_with_tangents(family, E, DE, cfg, j + 1)
        E, DE, dcost = _enkf_step_tangents(family, Et, DEt, theta, y, cfg, j + 1)
        grad += dcost
    return grad


def enkf_online_step_gradient(family, Et_frozen, theta, y, cfg, step):
    """Gradient of the single-step online EnKF cost (frozen propagation)."""
    theta = np.asarray(theta, dtype=float).ravel()
    DEt = np.zeros((2,) + Et_frozen.shape)
    _, _, dcost = _enkf_step_tangents(family, Et_frozen, DEt, theta, y, cfg, step)
    return dcost
