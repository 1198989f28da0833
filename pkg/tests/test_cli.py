import json

import numpy as np
import pytest

from varfilt import io
from varfilt.cli import main


def _write_cfg(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture
def linear_cfg(tmp_path):
    return _write_cfg(
        tmp_path, "lin.json",
        {
            "model": {"kind": "linear", "dim": 6},
            "horizon": 40,
            "family": "linear_gain",
            "theta_init": {"kind": "scaled_steady", "value": 0.5},
            "objective": {"mc_samples": 4},
            "optimizer": {"learning_rate": 5e-5, "iterations": 5},
            "seed": 3,
        },
    )


@pytest.fixture
def enkf_cfg(tmp_path):
    return _write_cfg(
        tmp_path, "enkf.json",
        {
            "model": {"kind": "l96", "dim": 8},
            "horizon": 30,
            "family": "enkf",
            "ensemble": {"n_members": 5},
            "theta_init": {"kind": "infl_loc", "lam": 1.1, "ell": 3.0},
            "sweep": {"lambda_grid": [1.05, 1.2], "ell_grid": [2.0, 5.0]},
            "seed": 5,
        },
    )


class TestSimulate:
    def test_row_counts(self, linear_cfg, tmp_path):
        out = tmp_path / "sim"
        assert main(["simulate", "--config", linear_cfg, "--out", str(out)]) == 0
        lines = (out / "truth.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 41  # header + J+1 state rows
        first = lines[1].split(",")
        assert first[0] == "0" and first[-1] == ""  # no observation at step 0

    def test_byte_identical_rerun(self, linear_cfg, tmp_path):
        o1, o2 = tmp_path / "s1", tmp_path / "s2"
        main(["simulate", "--config", linear_cfg, "--out", str(o1)])
        main(["simulate", "--config", linear_cfg, "--out", str(o2)])
        assert (o1 / "truth.csv").read_bytes() == (o2 / "truth.csv").read_bytes()
        assert (o1 / "truth.csv.json").read_bytes() == (o2 / "truth.csv.json").read_bytes()

    def test_ks_paper_scale_width(self, tmp_path):
        cfg = _write_cfg(tmp_path, "ks.json", {"model": {"kind": "ks"}, "horizon": 3, "seed": 1})
        out = tmp_path / "ks_out"
        assert main(["simulate", "--config", cfg, "--out", str(out), "--paper-scale"]) == 0
        header = (out / "truth.csv").read_text().splitlines()[0].split(",")
        assert sum(1 for h in header if h.startswith("x")) == 256

    def test_seed_override_changes_output(self, linear_cfg, tmp_path):
        o1, o2 = tmp_path / "a", tmp_path / "b"
        main(["simulate", "--config", linear_cfg, "--out", str(o1)])
        main(["simulate", "--config", linear_cfg, "--out", str(o2), "--seed", "99"])
        assert (o1 / "truth.csv").read_bytes() != (o2 / "truth.csv").read_bytes()


class TestLearnGain:
    def test_offline_outputs(self, linear_cfg, tmp_path):
        out = tmp_path / "lg"
        assert main(["learn-gain", "--config", linear_cfg, "--out", str(out)]) == 0
        K = io.read_matrix_csv(out / "gain_opt.csv")
        assert K.shape == (6, 6)
        trace = (out / "trace.csv").read_text().splitlines()
        assert trace[0].split(",") == [
            "iteration", "objective", "gain_frobenius_error", "kl_to_kalman_avg", "rmse",
        ]
        assert len(trace) == 1 + 6  # header + iterations + 1
        ev = json.loads((out / "eval.json").read_text())
        assert ev["in_sample"]["rmse"] > 0 and ev["out_of_sample"]["rmse"] > 0

    def test_diagnostics_trend_downward(self, tmp_path):
        cfg = _write_cfg(
            tmp_path, "lin2.json",
            {
                "model": {"kind": "linear", "dim": 6},
                "horizon": 60,
                "family": "linear_gain",
                "theta_init": {"kind": "scaled_steady", "value": 0.5},
                "objective": {"mc_samples": 5},
                "optimizer": {"learning_rate": 5e-5, "iterations": 40},
                "seed": 3,
            },
        )
        out = tmp_path / "lg2"
        assert main(["learn-gain", "--config", cfg, "--out", str(out)]) == 0
        rows = [r.split(",") for r in (out / "trace.csv").read_text().splitlines()[1:]]
        obj = [float(r[1]) for r in rows]
        gerr = [float(r[2]) for r in rows]
        kl = [float(r[3]) for r in rows]
        assert obj[-1] < obj[0] and gerr[-1] < gerr[0] and kl[-1] < kl[0]

    def test_partial_obs_shapes(self, tmp_path):
        cfg = _write_cfg(
            tmp_path, "po.json",
            {
                "model": {"kind": "linear", "dim": 8},
                "horizon": 30,
                "observation": {"pattern": "every-other"},
                "family": "linear_gain",
                "theta_init": {"kind": "scaled_steady", "value": 0.5},
                "objective": {"mc_samples": 4},
                "optimizer": {"learning_rate": 5e-5, "iterations": 3},
                "seed": 3,
            },
        )
        out = tmp_path / "po_out"
        assert main(["learn-gain", "--config", cfg, "--out", str(out)]) == 0
        K = io.read_matrix_csv(out / "gain_opt.csv")
        assert K.shape == (8, 4)

    def test_online_mode(self, tmp_path):
        cfg = _write_cfg(
            tmp_path, "on.json",
            {
                "model": {"kind": "linear", "dim": 5},
                "horizon": 25,
                "family": "linear_gain",
                "mode": "online",
                "theta_init": {"kind": "zero"},
                "objective": {"mc_samples": 4},
                "optimizer": {"learning_rate": 1e-4, "iterations": 10},
                "seed": 3,
            },
        )
        out = tmp_path / "on_out"
        assert main(["learn-gain", "--config", cfg, "--out", str(out)]) == 0
        assert io.read_matrix_csv(out / "gain_opt.csv").shape == (5, 5)
        assert io.read_matrix_csv(out / "gain_avg.csv").shape == (5, 5)
        trace = (out / "trace.csv").read_text().splitlines()
        assert len(trace) == 1 + 25

    def test_family_model_mismatch_exits_2(self, tmp_path):
        cfg = _write_cfg(
            tmp_path, "bad.json",
            {"model": {"kind": "l96", "dim": 8}, "family": "linear_gain", "seed": 1},
        )
        assert main(["learn-gain", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_enkf_family_rejected(self, enkf_cfg, tmp_path):
        assert main(["learn-gain", "--config", enkf_cfg, "--out", str(tmp_path / "x")]) == 2


class TestSweep:
    def test_outputs_and_determinism(self, enkf_cfg, tmp_path):
        o1, o2 = tmp_path / "sw1", tmp_path / "sw2"
        assert main(["sweep", "--config", enkf_cfg, "--out", str(o1)]) == 0
        assert main(["sweep", "--config", enkf_cfg, "--out", str(o2), "--threads", "3"]) == 0
        assert (o1 / "sweep.csv").read_bytes() == (o2 / "sweep.csv").read_bytes()
        assert (o1 / "sweep.json").read_bytes() == (o2 / "sweep.json").read_bytes()
        meta = json.loads((o1 / "sweep.json").read_text())
        costs = io.read_matrix_csv(o1 / "sweep.csv")
        assert costs.shape == (2, 2)
        i, k = np.unravel_index(np.argmin(costs), costs.shape)
        assert meta["argmin"]["lambda"] == meta["lambda_grid"][i]
        assert meta["argmin"]["ell"] == meta["ell_grid"][k]

    def test_gain_family_rejected(self, linear_cfg, tmp_path):
        assert main(["sweep", "--config", linear_cfg, "--out", str(tmp_path / "x")]) == 2


class TestSteadyState:
    def test_outputs_and_residual(self, linear_cfg, tmp_path):
        out = tmp_path / "ss"
        assert main(["steady-state", "--config", linear_cfg, "--out", str(out)]) == 0
        res = json.loads((out / "residuals.json").read_text())
        assert res["fixed_point_residual"] < 1e-10
        K1 = io.read_matrix_csv(out / "K_steady.csv")
        # CSV round trip is bit-exact
        io.write_matrix_csv(out / "K2.csv", K1)
        assert (out / "K_steady.csv").read_bytes() == (out / "K2.csv").read_bytes()

    def test_scalar_gain_equation(self, tmp_path):
        # scalar model with Sigma = 0.1 (zero scale leaves only the floor),
        # Gamma = 1: the emitted gain satisfies K = C_hat / (C_hat + 1)
        cfg = _write_cfg(
            tmp_path, "sc.json",
            {"model": {"kind": "linear", "dim": 1, "sigma_scale": 0.0}, "horizon": 5, "seed": 1},
        )
        out = tmp_path / "sc_out"
        assert main(["steady-state", "--config", cfg, "--out", str(out)]) == 0
        K = io.read_matrix_csv(out / "K_steady.csv")[0, 0]
        C_hat = io.read_matrix_csv(out / "C_hat_steady.csv")[0, 0]
        assert abs(K - C_hat / (C_hat + 1.0)) < 1e-12

    def test_l96_rejected(self, enkf_cfg, tmp_path):
        assert main(["steady-state", "--config", enkf_cfg, "--out", str(tmp_path / "x")]) == 2


class TestEvaluate:
    def test_round_trip(self, linear_cfg, tmp_path):
        lg = tmp_path / "lg"
        main(["learn-gain", "--config", linear_cfg, "--out", str(lg)])
        out = tmp_path / "ev"
        assert main([
            "evaluate", "--config", linear_cfg, "--theta", str(lg / "gain_opt.csv"),
            "--out", str(out),
        ]) == 0
        rep = json.loads((out / "eval.json").read_text())
        assert rep["rmse"] > 0 and rep["kl_time_avg"] is not None

    def test_shape_mismatch_exits_2(self, linear_cfg, tmp_path):
        bad = tmp_path / "bad.csv"
        io.write_matrix_csv(bad, np.eye(3))
        assert main(["evaluate", "--config", linear_cfg, "--theta", str(bad),
                     "--out", str(tmp_path / "x")]) == 2

    def test_missing_theta_exits_2(self, linear_cfg, tmp_path):
        assert main(["evaluate", "--config", linear_cfg, "--out", str(tmp_path / "x")]) == 2


class TestConfigValidation:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = _write_cfg(tmp_path, "u.json", {"model": {"kind": "linear"}, "horzon": 10})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_invalid_json_rejected(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "x")]) == 2

    def test_ensemble_options_need_enkf(self, tmp_path):
        cfg = _write_cfg(
            tmp_path, "e.json",
            {"model": {"kind": "linear", "dim": 4}, "family": "linear_gain",
             "ensemble": {"n_members": 5}, "seed": 1},
        )
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_infl_loc_init_needs_enkf(self, tmp_path):
        cfg = _write_cfg(
            tmp_path, "t.json",
            {"model": {"kind": "linear", "dim": 4}, "family": "linear_gain",
             "theta_init": {"kind": "infl_loc", "lam": 1.1, "ell": 2.0}, "seed": 1},
        )
        assert main(["learn-gain", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_kl_mode_family_mismatch(self, tmp_path):
        cfg = _write_cfg(
            tmp_path, "k.json",
            {"model": {"kind": "linear", "dim": 4}, "family": "linear_gain",
             "objective": {"kl_mode": "projected-ensemble"}, "seed": 1},
        )
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == 2

    def test_analytic_nll_needs_gaussian_family(self, tmp_path):
        cfg = _write_cfg(
            tmp_path, "n.json",
            {"model": {"kind": "l96", "dim": 8}, "family": "enkf",
             "ensemble": {"n_members": 5},
             "theta_init": {"kind": "infl_loc", "lam": 1.1, "ell": 3.0},
             "objective": {"nll_mode": "analytic"}, "seed": 1},
        )
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
