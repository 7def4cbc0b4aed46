import numpy as np
import pytest

from otdro import (
    Decision,
    DroProblem,
    SampleSet,
    identity_cost,
    make_hinge_loss,
    make_logistic_loss,
    make_squared_loss,
)
from otdro.experiments import synthetic_classification
from otdro.regions import build_constants


@pytest.fixture(scope="session")
def single_atom():
    """d=1, A=I, x=0, y=1, delta=0.25: lambda*=1.5, f*=2.25, X*=-0.5 at beta=1."""
    data = SampleSet(points=np.zeros((1, 1)), labels=np.ones(1))
    return DroProblem(
        data=data, cost=identity_cost(), loss=make_squared_loss(), delta=0.25, r_beta=1.5
    )


@pytest.fixture(scope="session")
def logistic_small():
    data = synthetic_classification(50, 5, seed=11)
    return DroProblem(
        data=data, cost=identity_cost(), loss=make_logistic_loss(), delta=0.05, r_beta=1.0
    )


@pytest.fixture(scope="session")
def logistic_small_consts(logistic_small):
    return build_constants(logistic_small, seed=0)


@pytest.fixture(scope="session")
def hinge_small():
    data = synthetic_classification(32, 3, seed=5)
    return DroProblem(
        data=data, cost=identity_cost(), loss=make_hinge_loss(), delta=0.05, r_beta=1.0
    )


def random_theta_in_W(rng, problem, consts):
    d = problem.data.d
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    b = rng.uniform(0.1, problem.r_beta)
    beta = b * direction
    lam = rng.uniform(consts.K1 * b, consts.K2 * problem.r_beta)
    return Decision(beta=beta, lam=lam)
