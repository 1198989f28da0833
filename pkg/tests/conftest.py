import numpy as np
import pytest

from varfilt import models, objective, ssm


@pytest.fixture(scope="session")
def linear_model():
    d = 10
    A = models.make_stable_random_matrix(d, seed=0)
    Sigma = models.make_process_noise(d, seed=0, scale=0.25)
    dyn = models.LinearDynamics(A=A, Sigma=Sigma)
    obs = models.identity_obs(d)
    return ssm.StateSpaceModel(dynamics=dyn, obs=obs, m0=np.ones(d), C0=np.eye(d))


@pytest.fixture(scope="session")
def linear_truth(linear_model):
    return ssm.simulate_truth(linear_model, 200, seed=11)


@pytest.fixture(scope="session")
def l96_model():
    d = 10
    dyn = models.Lorenz96Dynamics(D=d, F=8.0, dt=0.05, Sigma=0.1 * np.eye(d), classic=True)
    return ssm.StateSpaceModel(dynamics=dyn, obs=models.identity_obs(d), m0=np.ones(d), C0=np.eye(d))


@pytest.fixture(scope="session")
def l96_truth(l96_model):
    return ssm.simulate_truth(l96_model, 60, seed=5)


@pytest.fixture(scope="session")
def obj_cfg():
    return objective.ObjectiveConfig(seed=7, mc_samples=5)
