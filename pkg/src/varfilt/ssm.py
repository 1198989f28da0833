"""Truth-trajectory simulation and observation likelihoods.

The state-space model is

    v_{j+1} = Psi(v_j) + xi_j,    xi_j ~ N(0, Sigma)
    y_{j+1} = H v_{j+1} + eta_{j+1},  eta_{j+1} ~ N(0, Gamma)
    v_0 ~ N(m0, C0)

with the three noise sources drawn from independent derived streams (see
:mod:`varfilt.rng`), so a run is reproducible bit-for-bit from its seed.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import io, rng
from .exceptions import BlowupError, DecompositionError
from .models import psd_factor

__all__ = ["StateSpaceModel", "TruthRun", "simulate_truth", "obs_log_likelihood"]


@dataclass(frozen=True)
class StateSpaceModel:
    """Dynamics + observation model + initial Gaussian belief."""

    dynamics: object
    obs: object
    m0: np.ndarray
    C0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m0", np.asarray(self.m0, dtype=float))
        object.__setattr__(self, "C0", np.asarray(self.C0, dtype=float))

    @property
    def dim(self):
        return self.m0.shape[0]


@dataclass(frozen=True)
class TruthRun:
    """States v_0..v_J (rows) and observations y_1..y_J (rows)."""

    states: np.ndarray
    observations: np.ndarray
    seed: int

    def __post_init__(self):
        if self.observations.shape[0] != self.states.shape[0] - 1:
            raise ValueError("need exactly one observation per step after the first state")

    @property
    def horizon(self):
        return self.observations.shape[0]


def simulate_truth(model, J, seed):
    """Simulate the truth and its observations for J assimilation steps."""
    if J < 1:
        raise ValueError(f"horizon must be >= 1, got {J}")
    dyn, obs = model.dynamics, model.obs
    d, p = model.dim, obs.p

    init_gen = rng.substream(seed, rng.TRUTH_INIT)
    proc_gen = rng.substream(seed, rng.TRUTH_PROCESS)
    obs_gen = rng.substream(seed, rng.TRUTH_OBS)

    F0 = psd_factor(model.C0)
    Fs = psd_factor(dyn.Sigma)
    Fg = psd_factor(obs.Gamma)

    states = np.empty((J + 1, d))
    observations = np.empty((J, p))
    v = model.m0 + F0 @ init_gen.standard_normal(d)
    states[0] = v
    for j in range(J):
        v = dyn.step(v) + Fs @ proc_gen.standard_normal(d)
        if not np.all(np.isfinite(v)):
            raise BlowupError(f"truth simulation blew up at step {j + 1}", step=j + 1)
        states[j + 1] = v
        observations[j] = obs.H @ v + Fg @ obs_gen.standard_normal(p)
    return TruthRun(states=states, observations=observations, seed=int(seed))


def obs_log_likelihood(y, v, obs):
    """log N(y; H v, Gamma), including the -(1/2) log det(2 pi Gamma) constant."""
    if obs.chol_gamma is None:
        raise DecompositionError("Gamma is singular; log-likelihood undefined")
    r = np.asarray(y, dtype=float) - obs.H @ np.asarray(v, dtype=float)
    w = solve_triangular(obs.chol_gamma, r, lower=True)
    return -0.5 * float(w @ w) - obs.log_norm_const


def write_truth(run, csv_path, meta=None):
    """Write a truth run as CSV (step, state..., observation...) plus a JSON
    sidecar carrying the seed and a hash of the generating configuration.

    Row 0 has empty observation fields (y_0 does not exist).
    """
    d = run.states.shape[1]
    p = run.observations.shape[1]
    header = ["step"] + [f"x{i}" for i in range(d)] + [f"y{i}" for i in range(p)]

    def rows():
        yield [0] + [io.fmt(v) for v in run.states[0]] + [""] * p
        for j in range(1, run.states.shape[0]):
            yield [j] + [io.fmt(v) for v in run.states[j]] + [io.fmt(v) for v in run.observations[j - 1]]

    io.write_csv(csv_path, rows(), header=header)
    sidecar = {"seed": run.seed, "steps": run.horizon, "state_dim": d, "obs_dim": p}
    if meta is not None:
        sidecar["model_config_hash"] = io.config_hash(meta)
        sidecar["model_config"] = meta
    io.write_json(str(csv_path) + ".json", sidecar)


def read_truth(csv_path):
    """Read back a truth run written by :func:`write_truth`."""
    import csv as _csv

    with open(csv_path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        d = sum(1 for h in header if h.startswith("x"))
        p = sum(1 for h in header if h.startswith("y"))
        states, observations = [], []
        for row in reader:
            states.append([float(v) for v in row[1 : 1 + d]])
            if row[1 + d] != "":
                observations.append([float(v) for v in row[1 + d : 1 + d + p]])
    sidecar = io.read_json(str(csv_path) + ".json")
    return TruthRun(
        states=np.asarray(states), observations=np.asarray(observations), seed=int(sidecar["seed"])
    )
