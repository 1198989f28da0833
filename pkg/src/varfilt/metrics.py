"""Evaluation diagnostics: RMSE, gain-recovery error, and KL traces against
the exact Kalman filter reference."""

from dataclasses import dataclass

import numpy as np

from .exceptions import BlowupError, DecompositionError, FilterDivergenceError, VarfiltError
from .filters import Ensemble, kalman_analysis, kalman_predict, GaussianState
from .objective import kl_gaussian
from .ssm import simulate_truth

__all__ = ["EvalReport", "rmse", "kl_to_reference", "out_of_sample_eval",
           "filter_trajectory", "kalman_trajectory"]


@dataclass
class EvalReport:
    """Summary of running a learned filter on one trajectory."""

    rmse: float
    in_sample: bool
    kl_to_reference: np.ndarray = None
    kl_time_avg: float = None
    gain_frobenius_error: float = None
    diverged: bool = False
    diverged_step: int = None

    def to_dict(self):
        return {
            "rmse": None if self.rmse is None else float(self.rmse),
            "in_sample": bool(self.in_sample),
            "kl_time_avg": None if self.kl_time_avg is None else float(self.kl_time_avg),
            "kl_to_reference": None
            if self.kl_to_reference is None
            else [float(v) for v in self.kl_to_reference],
            "gain_frobenius_error": None
            if self.gain_frobenius_error is None
            else float(self.gain_frobenius_error),
            "diverged": bool(self.diverged),
            "diverged_step": self.diverged_step,
        }


def rmse(filter_means, truth_states):
    """Root-mean-square error over all steps and state components.

    Expects the means for steps 1..J and the matching truth states (the
    initial condition is excluded by the caller).
    """
    M = np.asarray(filter_means, dtype=float)
    T = np.asarray(truth_states, dtype=float)
    if M.shape != T.shape:
        raise VarfiltError(f"length/shape mismatch: means {M.shape} vs truth {T.shape}")
    return float(np.sqrt(np.mean((M - T) ** 2)))


def kl_to_reference(learned_trace, reference_trace):
    """Per-step KL(learned || reference) plus its time average."""
    if len(learned_trace) != len(reference_trace):
        raise VarfiltError("traces must have equal length")
    kls = np.array([kl_gaussian(g, r) for g, r in zip(learned_trace, reference_trace)])
    return kls, float(kls.mean())


def filter_trajectory(family, theta, truth, cfg):
    """Run the family's filter at fixed theta along a truth run.

    Returns (analysis_states, forecast_states); for ensemble families the
    entries are Ensembles, otherwise GaussianStates.  A blow-up is re-raised
    with the failing step attached.
    """
    theta = np.asarray(theta, dtype=float)
    state = family.init_state(cfg)
    analyses, forecasts = [], []
    for j in range(truth.horizon):
        try:
            frozen = family.forecast_part(state, cfg=cfg, step=j + 1)
            fc_view, state = family.analysis_part(frozen, theta, truth.observations[j])
        except BlowupError as exc:
            raise BlowupError(f"filter blew up at step {j + 1}: {exc}", step=j + 1) from exc
        forecasts.append(fc_view)
        analyses.append(state)
    return analyses, forecasts


def analysis_means(states):
    return np.array([s.mean for s in states])


def kalman_trajectory(model, truth):
    """Exact Kalman filter along a truth run (linear dynamics only)."""
    state = GaussianState(mean=model.m0, cov=model.C0)
    out = []
    for j in range(truth.horizon):
        forecast = kalman_predict(state, model.dynamics)
        state, _ = kalman_analysis(forecast, truth.observations[j], model.obs)
        out.append(state)
    return out


def write_filter_trace(states, truth, csv_path):
    """Serialize a filter run: per-step mean, covariance diagonal (ensemble
    sample variance for ensemble states), and per-step RMSE against truth.
    A JSON sidecar describes the columns."""
    from . import io
    from .filters import Ensemble

    d = truth.states.shape[1]
    header = (["step"] + [f"mean{i}" for i in range(d)]
              + [f"var{i}" for i in range(d)] + ["rmse"])

    def rows():
        for j, s in enumerate(states):
            if isinstance(s, Ensemble):
                m = s.mean
                v = s.members.var(axis=1, ddof=1)
            else:
                m = s.mean
                v = np.diag(s.cov)
            err = float(np.sqrt(np.mean((m - truth.states[j + 1]) ** 2)))
            yield ([j + 1] + [io.fmt(x) for x in m] + [io.fmt(x) for x in v] + [io.fmt(err)])

    io.write_csv(csv_path, rows(), header=header)
    io.write_json(str(csv_path) + ".json", {
        "steps": len(states), "state_dim": d,
        "columns": "step, analysis mean, analysis variance diagonal, per-step rmse",
    })


def write_objective_breakdown(breakdown, csv_path):
    """Serialize per-step (kl, nll) terms to CSV plus a JSON totals sidecar."""
    from . import io

    io.write_csv(
        csv_path,
        ([j + 1, io.fmt(kl), io.fmt(nll)] for j, (kl, nll) in enumerate(breakdown.per_step)),
        header=["step", "kl", "nll"],
    )
    io.write_json(str(csv_path) + ".json", {
        "total": float(breakdown.total),
        "kl_total": float(np.sum(breakdown.kl_terms)),
        "nll_total": float(np.sum(breakdown.nll_terms)),
        "steps": int(breakdown.per_step.shape[0]),
    })


def out_of_sample_eval(theta_star, family, fresh_seed, cfg, horizon,
                       reference_gain=None, in_sample=False):
    """Simulate a new truth run with ``fresh_seed``, filter it with the frozen
    parameters, and report RMSE (plus the KL trace against the exact Kalman
    filter when the model is linear).

    A filter blow-up is reported in the EvalReport rather than raised.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    if not np.all(np.isfinite(theta_star)):
        raise VarfiltError("theta must be finite")
    truth = simulate_truth(family.model, horizon, fresh_seed)
    try:
        analyses, _ = filter_trajectory(family, theta_star, truth, cfg)
    except BlowupError as exc:
        return EvalReport(rmse=None, in_sample=in_sample, diverged=True, diverged_step=exc.step)
    except (DecompositionError, FilterDivergenceError):
        return EvalReport(rmse=None, in_sample=in_sample, diverged=True, diverged_step=None)
    means = analysis_means(analyses)
    err = rmse(means, truth.states[1:])
    report = EvalReport(rmse=err, in_sample=in_sample)
    if family.kind in ("linear_gain",) and not family.is_ensemble:
        reference = kalman_trajectory(family.model, truth)
        kls, avg = kl_to_reference(analyses, reference)
        report.kl_to_reference = kls
        report.kl_time_avg = avg
    if reference_gain is not None:
        report.gain_frobenius_error = float(np.linalg.norm(theta_star - reference_gain))
    return report
