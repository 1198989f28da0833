"""Batch command-line driver.

Subcommands::

    varfilt simulate     --config cfg.json --out DIR        truth run -> CSV + sidecar
    varfilt learn-gain   --config cfg.json --out DIR        offline/online gain learning
    varfilt sweep        --config cfg.json --out DIR        (inflation, localization) grid
    varfilt steady-state --config cfg.json --out DIR        linear steady-state gain/covariances
    varfilt evaluate     --config cfg.json --theta K.csv --out DIR   out-of-sample report

Common flags: ``--seed`` overrides the config seed, ``--threads`` caps sweep
workers, ``--paper-scale`` switches desk-scale model defaults to the full
experiment sizes.  Exit codes: 0 success, 2 config error, 3 numerical
failure, 4 I/O error.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import io
from .config import load_experiment
from .exceptions import ConfigError, VarfiltError
from .filters import steady_state_kalman
from .metrics import (
    analysis_means,
    filter_trajectory,
    kalman_trajectory,
    kl_to_reference,
    out_of_sample_eval,
    rmse,
)
from .objective import offline_objective
from .optimize import grid_sweep, gradient_descent, offline_gradient_fn, online_learn
from .ssm import simulate_truth, write_truth


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _read_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def cmd_simulate(exp, out_dir, threads):
    truth = simulate_truth(exp["model"], exp["horizon"], exp["seed"])
    write_truth(truth, os.path.join(out_dir, "truth.csv"), meta=exp["raw"].get("model"))
    return 0


def _gain_diagnostics_hook(exp, truth):
    """Per-iteration diagnostics: RMSE always; gain error and KL trace when a
    steady-state/Kalman reference exists (linear model)."""
    family, cfg = exp["family"], exp["objective"]
    reference_gain = None
    reference_trace = None
    if exp["model_kind"] == "linear":
        _, reference_gain, _ = steady_state_kalman(exp["model"].dynamics, exp["model"].obs)
        reference_trace = kalman_trajectory(exp["model"], truth)

    def hook(theta):
        out = {}
        analyses, _ = filter_trajectory(family, theta, truth, cfg)
        out["rmse"] = rmse(analysis_means(analyses), truth.states[1:])
        if reference_gain is not None:
            out["gain_frobenius_error"] = float(np.linalg.norm(theta - reference_gain))
            out["kl_to_kalman_avg"] = kl_to_reference(analyses, reference_trace)[1]
        return out

    return hook, reference_gain


def cmd_learn_gain(exp, out_dir, threads):
    if exp["family"].kind not in ("linear_gain", "extended_gain"):
        raise ConfigError("learn-gain needs a fixed-gain family (linear_gain or extended_gain)")
    family, cfg, opt = exp["family"], exp["objective"], exp["optimizer"]
    truth = simulate_truth(exp["model"], exp["horizon"], exp["seed"])
    hook, reference_gain = _gain_diagnostics_hook(exp, truth)

    if exp["mode"] == "online":
        theta_seq, theta_bar, info = online_learn(family, exp["theta0"], truth, opt, cfg)
        K_opt = theta_seq[-1]
        rows = []
        for j in range(theta_seq.shape[0]):
            row = {"step": j + 1, "step_cost": info["step_costs"][j]}
            if reference_gain is not None:
                row["gain_frobenius_error"] = float(np.linalg.norm(theta_seq[j] - reference_gain))
            rows.append(row)
        header = list(rows[0].keys())
        io.write_csv(
            os.path.join(out_dir, "trace.csv"),
            ([io.fmt(r[h]) if h != "step" else r[h] for h in header] for r in rows),
            header=header,
        )
        io.write_matrix_csv(os.path.join(out_dir, "gain_avg.csv"), theta_bar)
        extra = {"mode": "online", "flagged_steps": info["flagged_steps"]}
    else:
        grad_fn = offline_gradient_fn(family, truth, cfg, opt)
        K_opt, trace = gradient_descent(
            lambda th: offline_objective(th, family, truth, cfg).total,
            exp["theta0"], opt, grad_fn=grad_fn, diagnostics=hook,
        )
        header = ["iteration", "objective"] + sorted(trace.diagnostics)
        io.write_csv(
            os.path.join(out_dir, "trace.csv"),
            (
                [i, io.fmt(trace.objectives[i])]
                + [io.fmt(trace.diagnostics[k][i]) for k in sorted(trace.diagnostics)]
                for i in range(len(trace))
            ),
            header=header,
        )
        extra = {"mode": "offline", "status": trace.status}
        if trace.status != "ok":
            raise VarfiltError(f"gradient descent failed: {trace.status}")

    io.write_matrix_csv(os.path.join(out_dir, "gain_opt.csv"), K_opt)
    report = out_of_sample_eval(
        K_opt, family, exp["raw"].get("eval_seed", exp["seed"] + 1), cfg,
        horizon=exp["raw"].get("eval_horizon", exp["horizon"]),
        reference_gain=reference_gain,
    )
    in_report = out_of_sample_eval(
        K_opt, family, exp["seed"], cfg, horizon=exp["horizon"],
        reference_gain=reference_gain, in_sample=True,
    )
    io.write_json(
        os.path.join(out_dir, "eval.json"),
        {"in_sample": in_report.to_dict(), "out_of_sample": report.to_dict(), **extra},
    )
    return 0


def cmd_sweep(exp, out_dir, threads):
    if exp["family"].kind != "enkf":
        raise ConfigError("sweep needs the enkf family")
    sraw = dict(exp["raw"].get("sweep") or {})
    extra = set(sraw) - {"lambda_grid", "ell_grid"}
    if extra:
        raise ConfigError(f"unknown sweep keys: {sorted(extra)}")
    lam_grid = sraw.get("lambda_grid", [1.0, 1.05, 1.1, 1.15, 1.2, 1.3, 1.4, 1.5])
    ell_grid = sraw.get("ell_grid", [1.0, 2.0, 3.0, 4.0, 5.0, 8.0, 12.0, 20.0, 30.0, 40.0])
    truth = simulate_truth(exp["model"], exp["horizon"], exp["seed"])
    res = grid_sweep(exp["family"], lam_grid, ell_grid, truth, exp["objective"], n_threads=threads)
    io.write_matrix_csv(os.path.join(out_dir, "sweep.csv"), res.costs)
    n_failed = int(np.sum(~np.isfinite(res.costs)))
    io.write_json(
        os.path.join(out_dir, "sweep.json"),
        {
            "lambda_grid": [float(v) for v in res.lambdas],
            "ell_grid": [float(v) for v in res.ells],
            "ell_axis": "radius" if exp["family"].radius_loc else "length",
            "argmin": {"lambda": res.argmin[0], "ell": res.argmin[1]},
            "min_cost": res.min_cost,
            "failed_cells": n_failed,
            "n_members": exp["family"].n_members,
        },
    )
    if n_failed:
        print(f"warning: {n_failed} grid cells diverged (recorded as inf)", file=sys.stderr)
    return 0


def cmd_steady_state(exp, out_dir, threads):
    if exp["model_kind"] != "linear":
        raise ConfigError("steady-state needs the linear model")
    dyn, obs = exp["model"].dynamics, exp["model"].obs
    C_hat, K, C = steady_state_kalman(dyn, obs)
    io.write_matrix_csv(os.path.join(out_dir, "K_steady.csv"), K)
    io.write_matrix_csv(os.path.join(out_dir, "C_steady.csv"), C)
    io.write_matrix_csv(os.path.join(out_dir, "C_hat_steady.csv"), C_hat)
    resid_fix = float(np.linalg.norm(C_hat - (dyn.A @ C @ dyn.A.T + dyn.Sigma)))
    gain_eq = K - C_hat @ obs.H.T @ np.linalg.inv(obs.H @ C_hat @ obs.H.T + obs.Gamma)
    io.write_json(
        os.path.join(out_dir, "residuals.json"),
        {"fixed_point_residual": resid_fix, "gain_equation_residual": float(np.linalg.norm(gain_eq))},
    )
    return 0


def cmd_evaluate(exp, out_dir, threads, theta_path=None):
    if theta_path is None:
        raise ConfigError("evaluate needs --theta pointing at a parameter CSV")
    theta = io.read_matrix_csv(theta_path)
    family = exp["family"]
    if family.kind == "enkf":
        theta = theta.ravel()
        if theta.shape != (2,):
            raise ConfigError(f"enkf parameters must be a (lambda, ell) pair, got {theta.shape}")
    elif theta.shape != family.theta_shape:
        raise ConfigError(f"gain shape {theta.shape} does not match family {family.theta_shape}")
    reference_gain = None
    if exp["model_kind"] == "linear" and family.kind == "linear_gain":
        _, reference_gain, _ = steady_state_kalman(exp["model"].dynamics, exp["model"].obs)
    report = out_of_sample_eval(
        theta, family, exp["raw"].get("eval_seed", exp["seed"] + 1), exp["objective"],
        horizon=exp["raw"].get("eval_horizon", exp["horizon"]), reference_gain=reference_gain,
    )
    io.write_json(os.path.join(out_dir, "eval.json"), report.to_dict())
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "learn-gain": cmd_learn_gain,
    "sweep": cmd_sweep,
    "steady-state": cmd_steady_state,
    "evaluate": cmd_evaluate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="varfilt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=1, help="worker cap for sweeps")
        p.add_argument("--paper-scale", action="store_true",
                       help="use full experiment sizes instead of desk-scale defaults")
        if name == "evaluate":
            p.add_argument("--theta", default=None, help="parameter CSV to evaluate")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        raw = _read_config(args.config)
        exp = load_experiment(raw, seed_override=args.seed, paper_scale=args.paper_scale)
        out_dir = _ensure_out(args.out)
        kwargs = {"theta_path": args.theta} if args.command == "evaluate" else {}
        return _COMMANDS[args.command](exp, out_dir, max(1, args.threads), **kwargs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except VarfiltError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
