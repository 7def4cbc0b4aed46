import math

import numpy as np
import pytest

from otdro.dual import dual_objective, inner_maximize, robust_loss_batch
from otdro.dual import grad_robust_loss
from otdro.model import (
    ConfigError,
    Decision,
    DroProblem,
    SampleSet,
    identity_cost,
    make_logistic_loss,
    make_squared_loss,
)
from otdro.optimizer import solve_lambda_star
from otdro.oracle import (
    OracleReport,
    fd_gradient,
    grid_inner_max,
    grid_min_fdelta,
    hessian_probe,
    oracle_dual_objective,
    primal_bound,
    run_check_suite,
)
from otdro.regions import build_constants

from conftest import random_theta_in_W


def test_grid_inner_max_hand_instance(single_atom):
    theta = Decision(beta=np.ones(1), lam=2.0)
    g, v = grid_inner_max(single_atom, theta, 0, points=1_000_000)
    assert g == pytest.approx(-2.0 / 3.0, abs=1e-6)
    assert v == pytest.approx(7.0 / 3.0, abs=1e-10)


def test_grid_inner_max_zero_beta(single_atom):
    g, v = grid_inner_max(single_atom, Decision(beta=np.zeros(1), lam=1.0), 0)
    assert g == 0.0 and v == pytest.approx(1.5)


def test_grid_agrees_with_bisection_random(logistic_small, logistic_small_consts):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(30):
        theta = random_theta_in_W(rng, logistic_small, logistic_small_consts)
        i = int(rng.integers(logistic_small.data.n))
        fast = inner_maximize(logistic_small, theta, i, cuts=60)
        _, v = grid_inner_max(logistic_small, theta, i, points=100_000)
        worst = max(worst, abs(fast.lrob - v))
    assert worst <= 1e-6


def test_fd_gradient_matches_analytic(logistic_small, logistic_small_consts):
    rng = np.random.default_rng(13)
    for _ in range(5):
        theta = random_theta_in_W(rng, logistic_small, logistic_small_consts)
        batch = robust_loss_batch(logistic_small, theta, cuts=80)
        n = logistic_small.data.n
        gb = np.zeros(5)
        gl = 0.0
        for i in range(n):
            inner = inner_maximize(logistic_small, theta, i, cuts=80)
            s = grad_robust_loss(logistic_small, theta, i, inner)
            gb += s.d_beta / n
            gl += s.d_lambda / n
        fdb, fdl = fd_gradient(logistic_small, theta)
        err = np.linalg.norm(np.concatenate([gb - fdb, [gl - fdl]]))
        err /= max(1.0, np.linalg.norm(np.concatenate([fdb, [fdl]])))
        assert err <= 1e-5


def test_fd_gradient_zero_beta_lambda_direction(single_atom):
    _, dl = fd_gradient(single_atom, Decision(beta=np.zeros(1), lam=1.0))
    assert dl == pytest.approx(single_atom.sqrt_delta, abs=1e-9)


def test_fd_richardson_scaling(logistic_small, logistic_small_consts):
    rng = np.random.default_rng(2)
    theta = random_theta_in_W(rng, logistic_small, logistic_small_consts)
    _, ref = fd_gradient(logistic_small, theta, h=1e-6)
    _, d1 = fd_gradient(logistic_small, theta, h=4e-4)
    _, d2 = fd_gradient(logistic_small, theta, h=2e-4)
    e1, e2 = abs(d1 - ref), abs(d2 - ref)
    assert e2 <= e1 / 2.5  # central differences: halving h quarters the error


def test_grid_min_fdelta_single_atom_slice(single_atom):
    theta, f = grid_min_fdelta(
        single_atom, [(1.0, 1.0)], (0.7, 3.0), resolution=41, refine_rounds=4
    )
    assert f == pytest.approx(2.25, abs=1e-6)
    assert theta.lam == pytest.approx(1.5, abs=1e-3)


def test_grid_min_fdelta_refinement_never_increases(single_atom):
    _, f1 = grid_min_fdelta(single_atom, [(1.0, 1.0)], (0.7, 3.0), resolution=21, refine_rounds=1)
    _, f2 = grid_min_fdelta(single_atom, [(1.0, 1.0)], (0.7, 3.0), resolution=21, refine_rounds=3)
    assert f2 <= f1 + 1e-15


def test_grid_min_fdelta_rejects_high_dim(logistic_small):
    with pytest.raises(ConfigError):
        grid_min_fdelta(logistic_small, [(-1, 1)] * 3, (0.1, 1.0))


def test_oracle_dual_objective_matches_fast_path(single_atom):
    theta = Decision(beta=np.ones(1), lam=2.0)
    assert oracle_dual_objective(single_atom, theta, gamma_points=4001) == pytest.approx(
        dual_objective(single_atom, theta, cuts=60), abs=1e-9
    )


def test_primal_bound_weak_duality(single_atom):
    beta = np.ones(1)
    ls = solve_lambda_star(single_atom, beta)
    dual_val = dual_objective(single_atom, Decision(beta=beta, lam=ls.value), cuts=80)
    zs = np.linspace(-2.0, 2.0, 200_001)
    pb = primal_bound(single_atom, beta, zs)
    assert pb <= dual_val + 1e-9
    assert dual_val - pb <= 1e-3  # strong duality at the grid resolution


def test_primal_bound_tiny_budget_recovers_empirical():
    data = SampleSet(points=np.array([[0.5], [-1.0], [2.0]]), labels=np.array([1.0, 0.0, 1.0]))
    prob = DroProblem(
        data=data, cost=identity_cost(), loss=make_squared_loss(), delta=1e-12, r_beta=1.0
    )
    beta = np.array([0.8])
    grid = data.points.ravel()  # destinations only at the atoms themselves
    pb = primal_bound(prob, beta, grid)
    u = prob.index_values(beta)
    emp = float(np.mean(prob.loss.value(u, data.labels)))
    # the tiny budget buys at most delta * (gain/cost) of improvement
    assert pb == pytest.approx(emp, abs=1e-9)


def test_primal_bound_random_instances_never_exceed_dual():
    rng = np.random.default_rng(3)
    for _ in range(5):
        pts = rng.normal(size=(3, 1))
        labels = rng.normal(size=3)
        prob = DroProblem(
            data=SampleSet(points=pts, labels=labels), cost=identity_cost(),
            loss=make_squared_loss(), delta=float(rng.uniform(0.05, 0.3)), r_beta=1.0,
        )
        beta = rng.uniform(-1, 1, size=1)
        if abs(beta[0]) < 0.1:
            beta[0] = 0.5
        ls = solve_lambda_star(prob, beta)
        dual_val = dual_objective(prob, Decision(beta=beta, lam=ls.value), cuts=80)
        span = float(np.max(np.abs(pts))) + 4.0
        pb = primal_bound(prob, beta, np.linspace(-span, span, 50_001))
        assert pb <= dual_val + 1e-9


def test_primal_bound_guards():
    data = SampleSet(points=np.zeros((6, 1)), labels=np.zeros(6))
    prob = DroProblem(
        data=data, cost=identity_cost(), loss=make_squared_loss(), delta=0.1, r_beta=1.0
    )
    with pytest.raises(ConfigError):
        primal_bound(prob, np.ones(1), [0.0])


def test_hessian_probe_positive_on_V(logistic_small, logistic_small_consts):
    rng = np.random.default_rng(21)
    thetas = []
    for _ in range(4):
        direction = rng.standard_normal(5)
        direction /= np.linalg.norm(direction)
        b = rng.uniform(0.3, logistic_small.r_beta)
        lam = rng.uniform(
            logistic_small_consts.K1 * b, logistic_small_consts.K2 * b
        )
        thetas.append(Decision(beta=b * direction, lam=lam))
    probe = hessian_probe(logistic_small, logistic_small_consts, thetas)
    assert probe.skipped == 0
    assert all(e >= -1e-6 for e in probe.min_eigenvalues)
    # beta-block curvature should respect sqrt(delta) * kappa0 / lambda
    for eig, bound in zip(probe.beta_block_min_eigenvalues, probe.beta_curvature_bounds):
        assert eig >= 0.5 * bound  # generous FD slack


def test_oracle_report_compare():
    rep = OracleReport.compare("x", 2.0, 2.0 + 1e-9, points=3)
    assert rep.abs_error == pytest.approx(1e-9)
    assert rep.params == {"points": 3}


def test_check_suite_passes():
    report = run_check_suite(seed=0)
    assert report["passed"], report
