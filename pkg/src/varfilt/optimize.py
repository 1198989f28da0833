"""Gradient computation, plain gradient descent, online learning, and
two-parameter grid sweeps."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, UnsupportedOperationError, VarfiltError
from .objective import offline_objective, _per_step_cost
from .sensitivity import (
    enkf_objective_gradient,
    enkf_online_step_gradient,
    gain_objective_gradient,
    gain_online_step_gradient,
)

__all__ = [
    "OptimizerConfig",
    "TrainingTrace",
    "grad_central_fd",
    "grad_forward_sensitivity",
    "gradient_descent",
    "online_learn",
    "grid_sweep",
    "SweepResult",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """Plain fixed-step gradient descent settings."""

    learning_rate: float = 1e-5
    iterations: int = 100
    grad_mode: str = "forward-sensitivity"
    fd_step: float = 1e-5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.grad_mode not in ("forward-sensitivity", "central-fd"):
            raise ConfigError(f"unknown grad_mode {self.grad_mode!r}")
        if not self.fd_step > 0:
            raise ConfigError("fd_step must be > 0")


@dataclass
class TrainingTrace:
    """Per-iteration record of the descent, including the initial point."""

    objectives: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    status: str = "ok"

    def record(self, objective, theta, diag=None):
        self.objectives.append(float(objective))
        self.thetas.append(np.array(theta, copy=True))
        if diag:
            for k, v in diag.items():
                self.diagnostics.setdefault(k, []).append(float(v))

    def __len__(self):
        return len(self.objectives)


def grad_central_fd(objective, theta, fd_step=1e-5):
    """Central finite differences, one coordinate at a time, with the probe
    step scaled per coordinate as fd_step * (1 + |theta_i|)."""
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    it = np.nditer(theta, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        h = fd_step * (1.0 + abs(theta[ix]))
        up = theta.copy()
        up[ix] += h
        down = theta.copy()
        down[ix] -= h
        f_up, f_down = objective(up), objective(down)
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise VarfiltError(f"objective non-finite when probing coordinate {ix}")
        grad[ix] = (f_up - f_down) / (2.0 * h)
    return grad


def grad_forward_sensitivity(family, theta, truth, cfg):
    """Forward tangent-propagation gradient of the offline objective.

    Raises UnsupportedOperationError for families without a tangent
    implementation; callers treat that as the signal to fall back to
    finite differences.
    """
    if family.kind in ("linear_gain", "extended_gain"):
        return gain_objective_gradient(family, theta, truth, cfg)
    if family.kind == "enkf":
        return enkf_objective_gradient(family, theta, truth, cfg)
    raise UnsupportedOperationError(f"no forward sensitivity for family {family.kind!r}")


def offline_gradient_fn(family, truth, cfg, opt):
    """Gradient callable for the offline objective per the configured mode
    (families without a tangent implementation fall back to differences)."""
    fd = lambda th: grad_central_fd(
        lambda q: offline_objective(q, family, truth, cfg).total, th, opt.fd_step
    )
    if opt.grad_mode != "forward-sensitivity":
        return fd

    def fn(th):
        try:
            return grad_forward_sensitivity(family, th, truth, cfg)
        except UnsupportedOperationError:
            return fd(th)

    return fn


def gradient_descent(objective, theta0, opt, grad_fn=None, diagnostics=None):
    """Fixed-step descent theta <- theta - alpha * grad(theta).

    ``objective`` maps theta to a scalar; ``grad_fn`` defaults to central
    finite differences of it.  ``diagnostics`` is an optional hook mapping
    theta to a dict of extra per-iteration scalars.  The trace holds
    ``iterations + 1`` entries (the initial point included); a non-finite
    objective stops the run early with a truncated trace and an error status.
    """
    if grad_fn is None:
        grad_fn = lambda th: grad_central_fd(objective, th, opt.fd_step)
    theta = np.array(theta0, dtype=float, copy=True)
    trace = TrainingTrace()
    for _ in range(opt.iterations):
        f = objective(theta)
        if not np.isfinite(f):
            trace.status = "non-finite objective"
            return theta, trace
        trace.record(f, theta, diagnostics(theta) if diagnostics else None)
        theta = theta - opt.learning_rate * np.asarray(grad_fn(theta), dtype=float)
    f = objective(theta)
    if not np.isfinite(f):
        trace.status = "non-finite objective"
        return theta, trace
    trace.record(f, theta, diagnostics(theta) if diagnostics else None)
    return theta, trace


def _online_step_grad_fn(family, frozen, y, cfg, opt, step):
    if opt.grad_mode == "forward-sensitivity":
        if family.kind in ("linear_gain", "extended_gain"):
            return lambda th: gain_online_step_gradient(family, frozen, th, y, cfg, step)
        if family.kind == "enkf":
            return lambda th: enkf_online_step_gradient(family, frozen, th, y, cfg, step)

    def step_objective(th):
        kl, nll, _ = _per_step_cost(family, frozen, np.asarray(th, dtype=float), y, cfg, step)
        return kl + nll

    return lambda th: grad_central_fd(step_objective, th, opt.fd_step)


def online_learn(family, theta0, truth, opt, cfg):
    """Online learning: at each assimilation step, freeze the forecast of the
    current belief, descend the single-step cost from the previous parameters,
    commit the result, and advance the filter with it.

    Returns (theta_seq, theta_bar, info) with theta_bar the arithmetic mean of
    the committed parameters.  ``info['step_costs']`` holds the committed
    per-step costs; a failed per-step optimization carries the previous theta
    forward and lands in ``info['flagged_steps']``.
    """
    theta = np.array(theta0, dtype=float, copy=True)
    state = family.init_state(cfg)
    thetas = []
    step_costs = []
    flagged = []
    for j in range(truth.horizon):
        y = truth.observations[j]
        step = j + 1
        frozen = family.forecast_part(state, cfg=cfg, step=step)
        grad_fn = _online_step_grad_fn(family, frozen, y, cfg, opt, step)
        new_theta = theta
        try:
            for _ in range(opt.iterations):
                new_theta = new_theta - opt.learning_rate * np.asarray(grad_fn(new_theta), dtype=float)
            kl, nll, analysis = _per_step_cost(family, frozen, new_theta, y, cfg, step)
            cost = kl + nll
            if not np.isfinite(cost):
                raise VarfiltError("non-finite online step cost")
        except VarfiltError:
            flagged.append(step)
            new_theta = theta
            kl, nll, analysis = _per_step_cost(family, frozen, new_theta, y, cfg, step)
            cost = kl + nll
        theta = new_theta
        thetas.append(np.array(theta, copy=True))
        step_costs.append(float(cost))
        state = analysis
    theta_seq = np.array(thetas)
    theta_bar = theta_seq.mean(axis=0)
    info = {"step_costs": np.array(step_costs), "flagged_steps": flagged}
    return theta_seq, theta_bar, info


@dataclass(frozen=True)
class SweepResult:
    """Cost matrix over an (inflation, localization) grid."""

    lambdas: np.ndarray
    ells: np.ndarray
    costs: np.ndarray  # shape (len(lambdas), len(ells)); +inf marks failed cells
    argmin: tuple  # (lambda, ell) at the minimal cost
    min_cost: float


def grid_sweep(family, lambda_grid, ell_grid, truth, cfg, n_threads=1):
    """Evaluate the offline objective on every (inflation, length) pair.

    Cells that blow up or lose positive definiteness are recorded as +inf
    rather than failing the sweep.  Evaluation order never affects the
    result: every cell is an independent pure function of its parameters.
    """
    lambdas = np.asarray(lambda_grid, dtype=float)
    ells = np.asarray(ell_grid, dtype=float)
    if lambdas.size == 0 or ells.size == 0:
        raise ConfigError("sweep grids must be nonempty")

    def cell(args):
        i, k = args
        try:
            return i, k, offline_objective(np.array([lambdas[i], ells[k]]), family, truth, cfg).total
        except VarfiltError:
            return i, k, np.inf

    jobs = [(i, k) for i in range(lambdas.size) for k in range(ells.size)]
    costs = np.full((lambdas.size, ells.size), np.inf)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(cell, jobs))
    else:
        results = [cell(j) for j in jobs]
    for i, k, val in results:
        costs[i, k] = val
    flat = int(np.argmin(costs))
    i_star, k_star = np.unravel_index(flat, costs.shape)
    return SweepResult(
        lambdas=lambdas,
        ells=ells,
        costs=costs,
        argmin=(float(lambdas[i_star]), float(ells[k_star])),
        min_cost=float(costs[i_star, k_star]),
    )
