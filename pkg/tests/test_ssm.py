import numpy as np
import pytest

from varfilt import models, ssm
from varfilt.exceptions import DecompositionError


class TestSimulateTruth:
    def test_noiseless_degenerate_case(self):
        # Sigma = 0, Gamma = 0, C0 = 0: v_j = A^j m0 and y_j = H v_j exactly
        d = 4
        A = models.make_stable_random_matrix(d, seed=2)
        dyn = models.LinearDynamics(A=A, Sigma=np.zeros((d, d)))
        obs = models.ObservationModel(H=np.eye(d), Gamma=np.zeros((d, d)))
        m0 = np.arange(1.0, d + 1)
        model = ssm.StateSpaceModel(dynamics=dyn, obs=obs, m0=m0, C0=np.zeros((d, d)))
        run = ssm.simulate_truth(model, 6, seed=0)
        v = m0.copy()
        for j in range(6):
            v = A @ v
            assert np.allclose(run.states[j + 1], v, atol=1e-12)
            assert np.allclose(run.observations[j], v, atol=1e-12)

    def test_deterministic_given_seed(self, linear_model):
        r1 = ssm.simulate_truth(linear_model, 30, seed=42)
        r2 = ssm.simulate_truth(linear_model, 30, seed=42)
        assert np.array_equal(r1.states, r2.states)
        assert np.array_equal(r1.observations, r2.observations)

    def test_shapes(self, linear_model):
        run = ssm.simulate_truth(linear_model, 25, seed=1)
        assert run.states.shape == (26, linear_model.dim)
        assert run.observations.shape == (25, linear_model.dim)

    def test_innovation_covariance_lln(self):
        # law of large numbers: cov(y_{j+1} - H Psi(v_j)) ~ H Sigma H^T + Gamma
        d = 4
        A = models.make_stable_random_matrix(d, seed=5)
        Sigma = models.make_process_noise(d, seed=5, scale=0.25)
        dyn = models.LinearDynamics(A=A, Sigma=Sigma)
        obs = models.identity_obs(d)
        model = ssm.StateSpaceModel(dynamics=dyn, obs=obs, m0=np.zeros(d), C0=np.eye(d))
        run = ssm.simulate_truth(model, 10_000, seed=9)
        innov = run.observations - (A @ run.states[:-1].T).T
        S = np.cov(innov.T, ddof=1)
        target = Sigma + np.eye(d)
        assert np.linalg.norm(S - target) / np.linalg.norm(target) < 0.10


class TestObsLogLikelihood:
    def test_zero_residual_identity_gamma(self):
        obs = models.identity_obs(3)
        v = np.array([1.0, 2.0, 3.0])
        val = ssm.obs_log_likelihood(v, v, obs)
        assert abs(val - (-1.5 * np.log(2 * np.pi))) < 1e-12

    def test_scalar_hand_value(self):
        # p=1, Gamma=[4], residual 2: -1/2 * (4/4) - 1/2 log(8 pi)
        obs = models.ObservationModel(H=np.array([[1.0]]), Gamma=np.array([[4.0]]))
        val = ssm.obs_log_likelihood(np.array([2.0]), np.array([0.0]), obs)
        assert abs(val - (-0.5 - 0.5 * np.log(8 * np.pi))) < 1e-12

    def test_quadratic_scaling(self):
        # the residual-dependent part is a quadratic form: scaling the
        # residual by c scales it by c^2
        obs = models.identity_obs(2, noise=2.0)
        v = np.zeros(2)
        r = np.array([0.3, -0.4])

        def quad(res):
            return -(ssm.obs_log_likelihood(res, v, obs) + obs.log_norm_const)

        assert abs(quad(3.0 * r) - 9.0 * quad(r)) < 1e-12

    def test_matches_bruteforce_density(self):
        # dense multivariate normal density with an explicit inverse
        gen = np.random.default_rng(3)
        H = gen.normal(0, 1, (2, 4))
        M = gen.normal(0, 1, (2, 2))
        Gamma = M @ M.T + 0.5 * np.eye(2)
        obs = models.ObservationModel(H=H, Gamma=Gamma)
        y = gen.normal(0, 1, 2)
        v = gen.normal(0, 1, 4)
        r = y - H @ v
        brute = -0.5 * r @ np.linalg.inv(Gamma) @ r - 0.5 * np.log(
            (2 * np.pi) ** 2 * np.linalg.det(Gamma)
        )
        assert abs(ssm.obs_log_likelihood(y, v, obs) - brute) < 1e-10

    def test_singular_gamma_raises(self):
        obs = models.ObservationModel(H=np.eye(2), Gamma=np.zeros((2, 2)))
        with pytest.raises(DecompositionError):
            ssm.obs_log_likelihood(np.ones(2), np.ones(2), obs)


class TestTruthSerialization:
    def test_csv_round_trip_bit_exact(self, linear_model, tmp_path):
        run = ssm.simulate_truth(linear_model, 12, seed=3)
        path = tmp_path / "truth.csv"
        ssm.write_truth(run, path, meta={"kind": "linear", "dim": linear_model.dim})
        back = ssm.read_truth(path)
        assert np.array_equal(back.states, run.states)
        assert np.array_equal(back.observations, run.observations)
        assert back.seed == run.seed

    def test_rewrite_is_byte_identical(self, linear_model, tmp_path):
        run = ssm.simulate_truth(linear_model, 8, seed=3)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        ssm.write_truth(run, p1, meta={"m": 1})
        ssm.write_truth(run, p2, meta={"m": 1})
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.csv.json").read_bytes() == (tmp_path / "b.csv.json").read_bytes()
