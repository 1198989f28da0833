"""Hot numeric kernels: numba-jitted versions with pure-numpy fallbacks.

The numba path is used when numba imports cleanly and the environment
variable ``VARFILT_NUMBA`` is unset or truthy; setting ``VARFILT_NUMBA=0``
forces the numpy path.  Both paths compute the same quantities (tests compare
them, and ``benchmarks/bench_kernels.py`` times them).

Kernels here are the inner loops that dominate runtime: Lorenz '96 stepping,
flow-map Jacobians and their directional derivatives, and the batched
similarity transforms of the forward-sensitivity covariance tangents.  The
Kuramoto-Sivashinsky integrator lives in :mod:`varfilt.models` because it is
FFT-bound and numba has no nopython FFT.
"""

import os

import numpy as np

_WANT_NUMBA = os.environ.get("VARFILT_NUMBA", "1").lower() not in ("0", "false", "no")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled via VARFILT_NUMBA")
    from numba import njit

    USING_NUMBA = True
except ImportError:
    USING_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


# ---------------------------------------------------------------------------
# Lorenz '96 tendency
#
# Paper convention:   dx_i/dt = -x_{i-1} (x_{i-2} + x_{i+1}) - x_i + F
# Classic convention: dx_i/dt =  x_{i-1} (x_{i+1} - x_{i-2}) - x_i + F
# ---------------------------------------------------------------------------


def _l96_tendency_np(x, F, classic):
    xm1 = np.roll(x, 1, axis=0)
    xm2 = np.roll(x, 2, axis=0)
    xp1 = np.roll(x, -1, axis=0)
    if classic:
        return xm1 * (xp1 - xm2) - x + F
    return -xm1 * (xm2 + xp1) - x + F


@njit(cache=True)
def _l96_tendency_nb(x, F, classic):
    d = x.shape[0]
    out = np.empty_like(x)
    for i in range(d):
        im1 = (i - 1) % d
        im2 = (i - 2) % d
        ip1 = (i + 1) % d
        if classic:
            out[i] = x[im1] * (x[ip1] - x[im2]) - x[i] + F
        else:
            out[i] = -x[im1] * (x[im2] + x[ip1]) - x[i] + F
    return out


@njit(cache=True)
def _l96_tendency_batch_nb(x, F, classic):
    d, n = x.shape
    out = np.empty_like(x)
    for i in range(d):
        im1 = (i - 1) % d
        im2 = (i - 2) % d
        ip1 = (i + 1) % d
        for j in range(n):
            if classic:
                out[i, j] = x[im1, j] * (x[ip1, j] - x[im2, j]) - x[i, j] + F
            else:
                out[i, j] = -x[im1, j] * (x[im2, j] + x[ip1, j]) - x[i, j] + F
    return out


def _l96_rk4_np(x, F, dt, classic):
    k1 = _l96_tendency_np(x, F, classic)
    k2 = _l96_tendency_np(x + 0.5 * dt * k1, F, classic)
    k3 = _l96_tendency_np(x + 0.5 * dt * k2, F, classic)
    k4 = _l96_tendency_np(x + dt * k3, F, classic)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def _l96_rk4_nb(x, F, dt, classic):
    k1 = _l96_tendency_nb(x, F, classic)
    k2 = _l96_tendency_nb(x + 0.5 * dt * k1, F, classic)
    k3 = _l96_tendency_nb(x + 0.5 * dt * k2, F, classic)
    k4 = _l96_tendency_nb(x + dt * k3, F, classic)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def _l96_rk4_batch_nb(x, F, dt, classic):
    k1 = _l96_tendency_batch_nb(x, F, classic)
    k2 = _l96_tendency_batch_nb(x + 0.5 * dt * k1, F, classic)
    k3 = _l96_tendency_batch_nb(x + 0.5 * dt * k2, F, classic)
    k4 = _l96_tendency_batch_nb(x + dt * k3, F, classic)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# Vector-field Jacobian (the tendency is quadratic, so the Jacobian is affine
# in the state; `_l96_jac_quad` is its state-dependent, linear-in-x part)
# ---------------------------------------------------------------------------


def _l96_jac_field_np(x, classic):
    d = x.shape[0]
    J = -np.eye(d)
    idx = np.arange(d)
    xm1 = np.roll(x, 1)
    xm2 = np.roll(x, 2)
    xp1 = np.roll(x, -1)
    if classic:
        J[idx, (idx - 1) % d] += xp1 - xm2
        J[idx, (idx - 2) % d] += -xm1
        J[idx, (idx + 1) % d] += xm1
    else:
        J[idx, (idx - 1) % d] += -(xm2 + xp1)
        J[idx, (idx - 2) % d] += -xm1
        J[idx, (idx + 1) % d] += -xm1
    return J


def _l96_jac_quad_np(w, classic):
    """Directional derivative of the field Jacobian along w (its -I part is
    constant, so this is just the Jacobian pattern built from w, without -I)."""
    if w.ndim == 1:
        J = _l96_jac_field_np(w, classic)
        return J + np.eye(w.shape[0])
    s, d = w.shape
    out = np.zeros((s, d, d))
    idx = np.arange(d)
    wm1 = np.roll(w, 1, axis=1)
    wm2 = np.roll(w, 2, axis=1)
    wp1 = np.roll(w, -1, axis=1)
    if classic:
        out[:, idx, (idx - 1) % d] += wp1 - wm2
        out[:, idx, (idx - 2) % d] += -wm1
        out[:, idx, (idx + 1) % d] += wm1
    else:
        out[:, idx, (idx - 1) % d] += -(wm2 + wp1)
        out[:, idx, (idx - 2) % d] += -wm1
        out[:, idx, (idx + 1) % d] += -wm1
    return out


@njit(cache=True)
def _l96_jac_field_nb(x, classic):
    d = x.shape[0]
    J = np.zeros((d, d))
    for i in range(d):
        im1 = (i - 1) % d
        im2 = (i - 2) % d
        ip1 = (i + 1) % d
        J[i, i] = -1.0
        if classic:
            J[i, im1] += x[ip1] - x[im2]
            J[i, im2] += -x[im1]
            J[i, ip1] += x[im1]
        else:
            J[i, im1] += -(x[im2] + x[ip1])
            J[i, im2] += -x[im1]
            J[i, ip1] += -x[im1]
    return J


# ---------------------------------------------------------------------------
# RK4 flow map: value, Jacobian-vector products, full Jacobian, and the
# directional derivatives of the Jacobian (needed when covariances are
# propagated through the linearized flow and the linearization point itself
# depends on the learned parameter)
# ---------------------------------------------------------------------------


def _l96_rk4_jvp_np(x, W, F, dt, classic):
    """Propagate tangents W (d, k) through one RK4 step from state x (d,)."""
    h2 = 0.5 * dt
    k1 = _l96_tendency_np(x, F, classic)
    A1 = _l96_jac_field_np(x, classic)
    x2 = x + h2 * k1
    k2 = _l96_tendency_np(x2, F, classic)
    A2 = _l96_jac_field_np(x2, classic)
    x3 = x + h2 * k2
    k3 = _l96_tendency_np(x3, F, classic)
    A3 = _l96_jac_field_np(x3, classic)
    x4 = x + dt * k3
    k4 = _l96_tendency_np(x4, F, classic)
    A4 = _l96_jac_field_np(x4, classic)

    W1 = A1 @ W
    W2 = A2 @ (W + h2 * W1)
    W3 = A3 @ (W + h2 * W2)
    W4 = A4 @ (W + dt * W3)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    W_next = W + (dt / 6.0) * (W1 + 2.0 * W2 + 2.0 * W3 + W4)
    return x_next, W_next


@njit(cache=True)
def _l96_rk4_jvp_nb(x, W, F, dt, classic):
    h2 = 0.5 * dt
    k1 = _l96_tendency_nb(x, F, classic)
    A1 = _l96_jac_field_nb(x, classic)
    x2 = x + h2 * k1
    k2 = _l96_tendency_nb(x2, F, classic)
    A2 = _l96_jac_field_nb(x2, classic)
    x3 = x + h2 * k2
    k3 = _l96_tendency_nb(x3, F, classic)
    A3 = _l96_jac_field_nb(x3, classic)
    x4 = x + dt * k3
    k4 = _l96_tendency_nb(x4, F, classic)
    A4 = _l96_jac_field_nb(x4, classic)

    W1 = np.dot(A1, W)
    W2 = np.dot(A2, W + h2 * W1)
    W3 = np.dot(A3, W + h2 * W2)
    W4 = np.dot(A4, W + dt * W3)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    W_next = W + (dt / 6.0) * (W1 + 2.0 * W2 + 2.0 * W3 + W4)
    return x_next, W_next


def _l96_rk4_jacobian_np(x, F, dt, classic):
    """One RK4 step and the exact Jacobian of the step map (chain rule
    through all four stages)."""
    d = x.shape[0]
    h2 = 0.5 * dt
    eye = np.eye(d)

    k1 = _l96_tendency_np(x, F, classic)
    A1 = _l96_jac_field_np(x, classic)
    x2 = x + h2 * k1
    k2 = _l96_tendency_np(x2, F, classic)
    A2 = _l96_jac_field_np(x2, classic) @ (eye + h2 * A1)
    x3 = x + h2 * k2
    k3 = _l96_tendency_np(x3, F, classic)
    A3 = _l96_jac_field_np(x3, classic) @ (eye + h2 * A2)
    x4 = x + dt * k3
    k4 = _l96_tendency_np(x4, F, classic)
    A4 = _l96_jac_field_np(x4, classic) @ (eye + dt * A3)

    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    J = eye + (dt / 6.0) * (A1 + 2.0 * A2 + 2.0 * A3 + A4)
    return x_next, J


@njit(cache=True)
def _l96_rk4_jacobian_nb(x, F, dt, classic):
    d = x.shape[0]
    h2 = 0.5 * dt
    eye = np.eye(d)

    k1 = _l96_tendency_nb(x, F, classic)
    A1 = _l96_jac_field_nb(x, classic)
    x2 = x + h2 * k1
    k2 = _l96_tendency_nb(x2, F, classic)
    A2 = np.dot(_l96_jac_field_nb(x2, classic), eye + h2 * A1)
    x3 = x + h2 * k2
    k3 = _l96_tendency_nb(x3, F, classic)
    A3 = np.dot(_l96_jac_field_nb(x3, classic), eye + h2 * A2)
    x4 = x + dt * k3
    k4 = _l96_tendency_nb(x4, F, classic)
    A4 = np.dot(_l96_jac_field_nb(x4, classic), eye + dt * A3)

    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    J = eye + (dt / 6.0) * (A1 + 2.0 * A2 + 2.0 * A3 + A4)
    return x_next, J


def _l96_rk4_jac_dirderivs_np(x, F, dt, classic):
    """RK4 step, its Jacobian J, and T[k] = dJ/dx_k (a (d, d, d) array).

    T lets the caller form the directional derivative of J along any v as
    einsum('kij,k->ij', T, v); the field Jacobian is affine in the state, so
    the second-order chain rule below is exact.
    """
    d = x.shape[0]
    h2 = 0.5 * dt
    eye = np.eye(d)
    V = eye  # unit directions

    k1 = _l96_tendency_np(x, F, classic)
    B1 = _l96_jac_field_np(x, classic)
    x2 = x + h2 * k1
    B2 = _l96_jac_field_np(x2, classic)
    x3 = x + h2 * _l96_tendency_np(x2, F, classic)
    B3 = _l96_jac_field_np(x3, classic)
    x4 = x + dt * _l96_tendency_np(x3, F, classic)
    B4 = _l96_jac_field_np(x4, classic)

    A1 = B1
    S1 = eye + h2 * A1
    A2 = B2 @ S1
    S2 = eye + h2 * A2
    A3 = B3 @ S2
    S3 = eye + dt * A3
    A4 = B4 @ S3

    k2 = _l96_tendency_np(x2, F, classic)
    k3 = _l96_tendency_np(x3, F, classic)
    k4 = _l96_tendency_np(x4, F, classic)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    J = eye + (dt / 6.0) * (A1 + 2.0 * A2 + 2.0 * A3 + A4)

    dA1 = _l96_jac_quad_np(V, classic)
    dx2 = V + h2 * (A1 @ V.T).T
    dA2 = np.matmul(_l96_jac_quad_np(dx2, classic), S1) + np.matmul(B2, h2 * dA1)
    dx3 = V + h2 * (A2 @ V.T).T
    dA3 = np.matmul(_l96_jac_quad_np(dx3, classic), S2) + np.matmul(B3, h2 * dA2)
    dx4 = V + dt * (A3 @ V.T).T
    dA4 = np.matmul(_l96_jac_quad_np(dx4, classic), S3) + np.matmul(B4, dt * dA3)
    T = (dt / 6.0) * (dA1 + 2.0 * dA2 + 2.0 * dA3 + dA4)
    return x_next, J, T


@njit(cache=True)
def _l96_rk4_jac_dirderivs_nb(x, F, dt, classic):
    d = x.shape[0]
    h2 = 0.5 * dt
    eye = np.eye(d)

    k1 = _l96_tendency_nb(x, F, classic)
    B1 = _l96_jac_field_nb(x, classic)
    x2 = x + h2 * k1
    k2 = _l96_tendency_nb(x2, F, classic)
    B2 = _l96_jac_field_nb(x2, classic)
    x3 = x + h2 * k2
    k3 = _l96_tendency_nb(x3, F, classic)
    B3 = _l96_jac_field_nb(x3, classic)
    x4 = x + dt * k3
    k4 = _l96_tendency_nb(x4, F, classic)
    B4 = _l96_jac_field_nb(x4, classic)

    A1 = B1
    S1 = eye + h2 * A1
    A2 = np.dot(B2, S1)
    S2 = eye + h2 * A2
    A3 = np.dot(B3, S2)
    S3 = eye + dt * A3
    A4 = np.dot(B4, S3)

    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    J = eye + (dt / 6.0) * (A1 + 2.0 * A2 + 2.0 * A3 + A4)

    T = np.empty((d, d, d))
    for k in range(d):
        v = eye[k]
        dA1 = _l96_jac_field_nb(v, classic) + eye
        dx2 = v + h2 * np.dot(A1, v)
        dA2 = np.dot(_l96_jac_field_nb(dx2, classic) + eye, S1) + np.dot(B2, h2 * dA1)
        dx3 = v + h2 * np.dot(A2, v)
        dA3 = np.dot(_l96_jac_field_nb(dx3, classic) + eye, S2) + np.dot(B3, h2 * dA2)
        dx4 = v + dt * np.dot(A3, v)
        dA4 = np.dot(_l96_jac_field_nb(dx4, classic) + eye, S3) + np.dot(B4, dt * dA3)
        T[k] = (dt / 6.0) * (dA1 + 2.0 * dA2 + 2.0 * dA3 + dA4)
    return x_next, J, T


# ---------------------------------------------------------------------------
# Batched similarity transform for covariance tangents: out[b] = G @ C[b] @ G^T
# ---------------------------------------------------------------------------


def _batched_similarity_np(G, C):
    B, d, _ = C.shape
    X = (C.reshape(B * d, d) @ G.T).reshape(B, d, d)
    Y = (G @ X.transpose(1, 0, 2).reshape(d, B * d)).reshape(d, B, d)
    return np.ascontiguousarray(Y.transpose(1, 0, 2))


@njit(cache=True)
def _batched_similarity_nb(G, C):
    B, d, _ = C.shape
    out = np.empty_like(C)
    Gt = np.ascontiguousarray(G.T)
    for b in range(B):
        out[b] = np.dot(G, np.dot(C[b], Gt))
    return out


if USING_NUMBA:
    l96_tendency_single = _l96_tendency_nb
    l96_tendency_batch = _l96_tendency_batch_nb
    l96_rk4_single = _l96_rk4_nb
    l96_rk4_batch = _l96_rk4_batch_nb
    l96_rk4_jvp = _l96_rk4_jvp_nb
    l96_rk4_jacobian = _l96_rk4_jacobian_nb
    l96_rk4_jac_dirderivs = _l96_rk4_jac_dirderivs_nb
    batched_similarity = _batched_similarity_nb
else:
    l96_tendency_single = _l96_tendency_np
    l96_tendency_batch = _l96_tendency_np
    l96_rk4_single = _l96_rk4_np
    l96_rk4_batch = _l96_rk4_np
    l96_rk4_jvp = _l96_rk4_jvp_np
    l96_rk4_jacobian = _l96_rk4_jacobian_np
    l96_rk4_jac_dirderivs = _l96_rk4_jac_dirderivs_np
    batched_similarity = _batched_similarity_np
