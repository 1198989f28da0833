"""Experiment configuration: JSON schema, validation, and object builders.

A config is one JSON object; unknown keys are rejected so typos fail fast.
``--paper-scale`` switches the desk-scale model defaults (small state
dimension, short horizon) to the full experiment sizes.
"""

import numpy as np

from .exceptions import ConfigError
from .models import (
    KSDynamics,
    LinearDynamics,
    Lorenz96Dynamics,
    every_other_obs,
    identity_obs,
    make_process_noise,
    make_stable_random_matrix,
)
from .objective import EnKFFamily, ExtendedGainFamily, FixedGainFamily, ObjectiveConfig
from .optimize import OptimizerConfig
from .ssm import StateSpaceModel

DESK_DEFAULTS = {
    "linear": {"dim": 10, "horizon": 200},
    "l96": {"dim": 10, "horizon": 200},
    "ks": {"dim": 64, "horizon": 100},
}
PAPER_DEFAULTS = {
    "linear": {"dim": 40, "horizon": 1000},
    "l96": {"dim": 40, "horizon": 1000},
    "ks": {"dim": 256, "horizon": 200},
}

_MODEL_KEYS = {
    "linear": {"kind", "dim", "sigma_scale", "seed"},
    "l96": {"kind", "dim", "forcing", "dt", "noise", "classic", "seed"},
    "ks": {"kind", "dim", "length", "dt", "noise", "steps_per_obs", "seed"},
}
_TOP_KEYS = {
    "model", "horizon", "observation", "family", "theta_init", "objective",
    "optimizer", "ensemble", "sweep", "mode", "seed", "eval_seed", "eval_horizon",
}
_FAMILIES = {"linear_gain", "extended_gain", "enkf"}


def _check_keys(section, given, allowed):
    extra = set(given) - allowed
    if extra:
        raise ConfigError(f"unknown {section} keys: {sorted(extra)}")


def _model_defaults(kind, paper_scale):
    table = PAPER_DEFAULTS if paper_scale else DESK_DEFAULTS
    if kind not in table:
        raise ConfigError(f"unknown model kind {kind!r}")
    return dict(table[kind])


def build_model(raw, master_seed, paper_scale=False):
    """Build a StateSpaceModel from the ``model`` + ``observation`` sections."""
    mraw = dict(raw.get("model") or {})
    kind = mraw.get("kind")
    if kind not in _MODEL_KEYS:
        raise ConfigError(f"model.kind must be one of {sorted(_MODEL_KEYS)}, got {kind!r}")
    _check_keys("model", mraw, _MODEL_KEYS[kind])
    defaults = _model_defaults(kind, paper_scale)
    dim = int(mraw.get("dim", defaults["dim"]))
    model_seed = int(mraw.get("seed", master_seed))

    oraw = dict(raw.get("observation") or {})
    _check_keys("observation", oraw, {"pattern", "noise"})
    pattern = oraw.get("pattern", "full")
    if pattern not in ("full", "every-other"):
        raise ConfigError(f"observation.pattern must be 'full' or 'every-other', got {pattern!r}")

    if kind == "linear":
        A = make_stable_random_matrix(dim, model_seed)
        Sigma = make_process_noise(dim, model_seed, scale=float(mraw.get("sigma_scale", 0.25)))
        dyn = LinearDynamics(A=A, Sigma=Sigma)
        default_obs_noise = 1.0
        m0 = np.ones(dim)
    elif kind == "l96":
        if dim < 4:
            raise ConfigError("l96 model needs dim >= 4")
        dyn = Lorenz96Dynamics(
            D=dim,
            F=float(mraw.get("forcing", 8.0)),
            dt=float(mraw.get("dt", 0.05)),
            Sigma=float(mraw.get("noise", 0.1)) * np.eye(dim),
            classic=bool(mraw.get("classic", True)),
        )
        default_obs_noise = 1.0
        m0 = np.ones(dim)
    else:
        if dim % 2 != 0:
            raise ConfigError("ks model needs even dim")
        dyn = KSDynamics(
            L=float(mraw.get("length", 22.0)),
            D=dim,
            dt=float(mraw.get("dt", 0.25)),
            Sigma=float(mraw.get("noise", 0.01)) * np.eye(dim),
            steps_per_obs=int(mraw.get("steps_per_obs", 5)),
        )
        default_obs_noise = 0.5
        m0 = np.zeros(dim)

    noise = float(oraw.get("noise", default_obs_noise))
    obs = every_other_obs(dim, noise=noise) if pattern == "every-other" else identity_obs(dim, noise=noise)
    horizon = int(raw.get("horizon", defaults["horizon"]))
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    return StateSpaceModel(dynamics=dyn, obs=obs, m0=m0, C0=np.eye(dim)), horizon, kind


def build_family(raw, model, kind):
    fam_kind = raw.get("family")
    if fam_kind is None:
        fam_kind = {"linear": "linear_gain", "l96": "extended_gain", "ks": "enkf"}[kind]
    if fam_kind not in _FAMILIES:
        raise ConfigError(f"family must be one of {sorted(_FAMILIES)}, got {fam_kind!r}")
    if fam_kind == "linear_gain" and kind != "linear":
        raise ConfigError("linear_gain family requires the linear model")
    if fam_kind == "extended_gain" and kind == "ks":
        raise ConfigError("extended_gain family has no Jacobian for the ks model")
    if fam_kind == "enkf":
        eraw = dict(raw.get("ensemble") or {})
        _check_keys(
            "ensemble", eraw,
            {"n_members", "single_inflation", "stochastic_noise", "radius_loc", "loc_scale"},
        )
        n = int(eraw.get("n_members", 5))
        if n < 2:
            raise ConfigError("ensemble.n_members must be >= 2")
        return EnKFFamily(
            model,
            n_members=n,
            loc_scale=float(eraw.get("loc_scale", 1.0)),
            single_inflation=bool(eraw.get("single_inflation", False)),
            stochastic_noise=bool(eraw.get("stochastic_noise", False)),
            radius_loc=bool(eraw.get("radius_loc", True)),
        )
    if raw.get("ensemble"):
        raise ConfigError("ensemble options are only valid with the enkf family")
    cls = FixedGainFamily if fam_kind == "linear_gain" else ExtendedGainFamily
    return cls(model)


def build_objective_config(raw, master_seed, family=None):
    oraw = dict(raw.get("objective") or {})
    _check_keys(
        "objective", oraw,
        {"mc_samples", "shrinkage_gamma", "nll_mode", "kl_mode", "seed", "mle_projection"},
    )
    oraw.setdefault("seed", master_seed)
    if family is not None:
        wanted = "projected-ensemble" if family.is_ensemble else "gaussian-analytic"
        oraw.setdefault("kl_mode", wanted)
        if oraw["kl_mode"] != wanted:
            raise ConfigError(
                f"kl_mode {oraw['kl_mode']!r} is inconsistent with the {family.kind} family"
            )
        if family.is_ensemble and oraw.get("nll_mode") == "analytic":
            raise ConfigError("analytic nll_mode needs a Gaussian family")
    return ObjectiveConfig(**oraw)


def build_optimizer_config(raw):
    praw = dict(raw.get("optimizer") or {})
    _check_keys("optimizer", praw, {"learning_rate", "iterations", "grad_mode", "fd_step"})
    return OptimizerConfig(**praw)


def build_theta_init(raw, family, model):
    """Initial parameters: zeros, scaled identity, scaled steady-state gain,
    an explicit (inflation, localization) pair, or a literal matrix."""
    traw = dict(raw.get("theta_init") or {})
    _check_keys("theta_init", traw, {"kind", "value", "lam", "ell", "matrix"})
    kind = traw.get("kind", "infl_loc" if family.kind == "enkf" else "scaled_steady")
    if family.kind == "enkf":
        if kind != "infl_loc":
            raise ConfigError("enkf family takes theta_init.kind = 'infl_loc'")
        return np.array([float(traw.get("lam", 1.1)), float(traw.get("ell", 4.0))])
    d, p = family.theta_shape
    if kind == "zero":
        return np.zeros((d, p))
    if kind == "scaled_identity":
        # c * H^T: weight c on each observed component (c * I under full obs)
        return float(traw.get("value", 0.5)) * family.obs.H.T
    if kind == "scaled_steady":
        from .filters import steady_state_kalman

        if family.kind != "linear_gain":
            raise ConfigError("scaled_steady init needs the linear model")
        _, K_steady, _ = steady_state_kalman(model.dynamics, model.obs)
        return float(traw.get("value", 0.5)) * K_steady
    if kind == "matrix":
        K = np.asarray(traw.get("matrix"), dtype=float)
        if K.shape != (d, p):
            raise ConfigError(f"theta_init.matrix must have shape {(d, p)}, got {K.shape}")
        return K
    raise ConfigError(f"unknown theta_init.kind {kind!r}")


def load_experiment(raw, seed_override=None, paper_scale=False):
    """Validate a raw config dict and build every object an experiment needs."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("config", raw, _TOP_KEYS)
    master_seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    model, horizon, kind = build_model(raw, master_seed, paper_scale)
    family = build_family(raw, model, kind)
    cfg = build_objective_config(raw, master_seed, family=family)
    opt = build_optimizer_config(raw)
    theta0 = build_theta_init(raw, family, model)
    mode = raw.get("mode", "offline")
    if mode not in ("offline", "online"):
        raise ConfigError(f"mode must be 'offline' or 'online', got {mode!r}")
    return {
        "raw": raw,
        "seed": master_seed,
        "model": model,
        "model_kind": kind,
        "horizon": horizon,
        "family": family,
        "objective": cfg,
        "optimizer": opt,
        "theta0": theta0,
        "mode": mode,
    }
