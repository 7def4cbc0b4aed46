"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured figure next to its stated tolerance.  Run with -s to see them.
"""

import dataclasses
import json
import math
import time

import numpy as np
import pytest

from otdro.cli import main as cli_main
from otdro.dual import (
    dual_objective,
    grad_robust_loss,
    inner_maximize,
    squared_loss_closed_form,
)
from otdro.experiments import plain_sgd, synthetic_classification
from otdro.model import (
    Decision,
    DroProblem,
    SampleSet,
    identity_cost,
    make_hinge_loss,
    make_logistic_loss,
    make_squared_loss,
    scaled_identity_cost,
)
from otdro.optimizer import (
    StepSchedule,
    rate_diagnostic,
    sgd_nonsmooth,
    sgd_smooth,
    solve_lambda_star,
)
from otdro.oracle import (
    fd_gradient,
    grid_min_fdelta,
    grid_project_2d,
    hessian_probe,
    primal_bound,
    trapezoid_boundary,
)
from otdro.regions import build_constants, estimate_L_bounds, project_W
from otdro.worstcase import comparative_statics, worst_case


def _report(num, detail):
    print(f"\n[criterion {num:2d}] PASS  {detail}")


# --- shared instances --------------------------------------------------------


@pytest.fixture(scope="module")
def atom():
    data = SampleSet(points=np.zeros((1, 1)), labels=np.ones(1))
    return DroProblem(
        data=data, cost=identity_cost(), loss=make_squared_loss(), delta=0.25, r_beta=1.5
    )


@pytest.fixture(scope="module")
def logistic_2d():
    """Classification instance with an honestly estimated strong-convexity
    threshold; the fixed decision vector comes from a plain fit."""
    data = synthetic_classification(64, 2, seed=8)
    base = DroProblem(
        data=data, cost=identity_cost(), loss=make_logistic_loss(), delta=1e-3, r_beta=0.5
    )
    x, y = data.points, data.labels
    # nondegeneracy constants measured over a grid of directions in the ball
    angles = np.linspace(0, 2 * math.pi, 181)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    p = 0.5
    proj = np.abs(dirs @ x.T)  # |beta'X| / ||beta|| per direction
    c2 = 0.99 * float(np.quantile(proj, 1 - p, axis=1).min())
    c1_vals = []
    for r in (0.05, 0.25, 0.5):
        u = r * dirs @ x.T
        lp = np.abs(np.asarray(base.loss.dplus(u, y[None, :])))
        c1_vals.append(np.quantile(lp, 1 - p, axis=1).min())
    c1 = 0.99 * float(min(c1_vals))
    prob = dataclasses.replace(base, nondegeneracy=(c1, c2, p))
    L = estimate_L_bounds(prob, seed=0)
    delta1 = build_constants(prob, L_bounds=L).delta1
    prob = dataclasses.replace(prob, delta=0.9 * delta1)
    fit = plain_sgd(prob, StepSchedule(0.5, 0.55), 0.0, 4000, seed=0)
    return prob, fit.final_bar.beta, delta1


def test_criterion_1_closed_form_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(1000):
        xv = float(rng.normal() * 2)
        yv = float(rng.normal())
        delta = float(rng.uniform(0.05, 0.5))
        prob = DroProblem(
            data=SampleSet(points=np.array([[xv]]), labels=np.array([yv])),
            cost=identity_cost(), loss=make_squared_loss(), delta=delta, r_beta=3.0,
        )
        beta = rng.uniform(-2.0, 2.0, size=1)
        a = float(beta @ beta)
        lam = math.sqrt(delta) * a * (1.0 + rng.uniform(0.2, 3.0)) + rng.uniform(0.01, 1.0)
        theta = Decision(beta=beta, lam=lam)
        fast = inner_maximize(prob, theta, 0, cuts=60).lrob
        ref = squared_loss_closed_form(prob, theta, 0)
        worst = max(worst, abs(fast - ref))
    elapsed = time.time() - t0
    assert worst <= 1e-8
    assert elapsed < 5.0
    _report(1, f"max |bisection - closed form| = {worst:.2e} <= 1e-8 over 1000 "
               f"instances in {elapsed:.2f}s (< 5s)")


def test_criterion_2_gradient_correctness():
    t0 = time.time()
    data = synthetic_classification(50, 5, seed=11)
    prob = DroProblem(
        data=data, cost=identity_cost(), loss=make_logistic_loss(), delta=0.05, r_beta=1.0
    )
    consts = build_constants(prob, seed=0)
    rng = np.random.default_rng(29)
    worst = 0.0
    for _ in range(100):
        direction = rng.standard_normal(5)
        direction /= np.linalg.norm(direction)
        b = rng.uniform(0.1, prob.r_beta)
        theta = Decision(
            beta=b * direction, lam=rng.uniform(consts.K1 * b, consts.K2 * prob.r_beta)
        )
        gb = np.zeros(5)
        gl = 0.0
        for i in range(prob.data.n):
            inner = inner_maximize(prob, theta, i, cuts=80, consts=consts)
            s = grad_robust_loss(prob, theta, i, inner)
            gb += s.d_beta / prob.data.n
            gl += s.d_lambda / prob.data.n
        fdb, fdl = fd_gradient(prob, theta, cuts=80)
        num = np.linalg.norm(np.concatenate([gb - fdb, [gl - fdl]]))
        den = max(1.0, float(np.linalg.norm(np.concatenate([fdb, [fdl]]))))
        worst = max(worst, num / den)
    elapsed = time.time() - t0
    assert worst <= 1e-5
    assert elapsed < 30.0
    _report(2, f"max relative gradient error = {worst:.2e} <= 1e-5 at 100 points "
               f"in {elapsed:.1f}s (< 30s)")


def test_criterion_3_worst_case_budget(logistic_2d):
    prob, beta, delta1 = logistic_2d
    assert prob.delta < delta1
    wc = worst_case(prob, beta, tol=1e-10)
    assert wc.regime == "unique"
    budget_err = abs(wc.budget - prob.delta)
    assert budget_err <= 1e-6 * prob.delta
    u_star = wc.X_star @ beta
    primal_value = float(np.mean(prob.loss.value(u_star, prob.data.labels)))
    dual_value = dual_objective(prob, Decision(beta=beta, lam=wc.lambda_star), cuts=80)
    slack = abs(primal_value - dual_value)
    assert slack <= 1e-6
    _report(3, f"|E[c(X,X*)] - delta| = {budget_err:.2e} <= {1e-6 * prob.delta:.2e}; "
               f"|E[loss(X*)] - dual| = {slack:.2e} <= 1e-6 (delta={prob.delta:.2e} "
               f"< delta1={delta1:.2e})")


def test_criterion_4_comparative_statics(logistic_2d):
    prob, beta, _ = logistic_2d
    grid = [0.01, 0.04, 0.09, 0.16, 0.25]
    stats = comparative_statics(prob, beta, grid)
    assert stats.monotonicity_violations == 0
    assert stats.min_direction_cosine >= 1 - 1e-10
    _report(4, f"0 monotonicity violations over deltas {grid}; min direction cosine "
               f"= {stats.min_direction_cosine:.15f} >= 1 - 1e-10")


def test_criterion_5_single_atom_analytics(atom):
    t0 = time.time()
    ls = solve_lambda_star(atom, np.ones(1), tol=1e-12)
    f_star = dual_objective(atom, Decision(beta=np.ones(1), lam=ls.value), cuts=80)
    wc = worst_case(atom, np.ones(1), tol=1e-12)
    elapsed = time.time() - t0
    assert abs(ls.value - 1.5) <= 1e-6
    assert abs(f_star - 2.25) <= 1e-6
    assert abs(wc.X_star[0, 0] - (-0.5)) <= 1e-6
    assert elapsed < 1.0
    _report(5, f"lambda* = {ls.value:.9f} (1.5 +- 1e-6), f* = {f_star:.9f} "
               f"(2.25 +- 1e-6), X* = {wc.X_star[0,0]:.9f} (-0.5 +- 1e-6) in {elapsed:.2f}s")


def test_criterion_6_rate_separation():
    t0 = time.time()
    # strongly convex arm: squared loss, spread cost spectrum, delta below the
    # estimated joint strong-convexity threshold, warm-started multiplier
    rng = np.random.default_rng(77)
    x = rng.uniform(0.5, 2.0, size=(8, 1))
    y = 0.6 * x[:, 0] + 0.25 * rng.standard_normal(8)
    vols = rng.uniform(0.35, 3.5, size=8)
    data = SampleSet(points=x, labels=y)
    betas = np.linspace(-1, 1, 401)
    resid = 2.0 * np.abs(betas[:, None] * x[:, 0][None, :] - y[None, :])
    p = 0.75
    c1 = 0.99 * float(np.quantile(resid, 1 - p, axis=1).min())
    c2 = 0.99 * float(np.min(np.abs(x)))
    prob0 = DroProblem(
        data=data, cost=scaled_identity_cost(vols), loss=make_squared_loss(),
        delta=1e-6, r_beta=1.0, nondegeneracy=(c1, c2, p),
    )
    L = estimate_L_bounds(prob0, seed=0)
    delta1 = build_constants(prob0, L_bounds=L).delta1
    prob = dataclasses.replace(prob0, delta=0.9 * delta1)
    consts = build_constants(prob, L_bounds=L)

    warm = plain_sgd(prob, StepSchedule(0.5, 0.55), 0.0, 2000, seed=1)
    lam_hat = solve_lambda_star(prob, warm.final_bar.beta, tol=1e-8).value
    _, f_star = grid_min_fdelta(
        prob, [(-1.0, 1.0)], (1e-5, consts.K2 * prob.r_beta),
        resolution=41, refine_rounds=6, gamma_points=2001,
    )
    trace = sgd_smooth(
        prob, consts, StepSchedule(0.1, 0.55), xi=0.0, iterations=100_000, seed=1,
        eval_every=500, eval_cuts=60,
        theta0=Decision(beta=warm.final_bar.beta, lam=lam_hat),
    )
    diag = rate_diagnostic(trace, f_star, (1e3, 1e5))
    assert diag.slope <= -0.8, diag

    # convex-only arm: hinge, tau = 1/2, xi >= 1
    data_h = synthetic_classification(16, 2, seed=13)
    prob_h = DroProblem(
        data=data_h, cost=identity_cost(), loss=make_hinge_loss(), delta=0.05, r_beta=1.0
    )
    eta = 1e-3
    _, f_star_h = grid_min_fdelta(
        prob_h, [(-1, 1), (-1, 1)], (0.02, 1.2),
        resolution=17, refine_rounds=5, gamma_points=801,
    )
    trace_h = sgd_nonsmooth(
        prob_h, StepSchedule(0.5, 0.5), eta=eta, xi=1.0, iterations=100_000, seed=3,
        eval_every=500, eval_cuts=60,
    )
    diag_h = rate_diagnostic(trace_h, f_star_h, (1e3, 1e5))
    assert diag_h.slope <= -0.4, diag_h

    ks = trace_h.ks().astype(float)
    gaps = trace_h.f_bars() - f_star_h
    floor = eta * prob_h.sqrt_delta
    w = (ks >= 1e3) & (ks <= 1e5) & (gaps > 0)
    c_fit = max(
        0.0, float(np.sum((gaps[w] - floor) * ks[w] ** -0.5) / np.sum(ks[w] ** -1.0))
    )
    terminal = float(gaps[-1])
    envelope = floor + c_fit * float(ks[-1]) ** -0.5
    assert terminal <= envelope
    elapsed = time.time() - t0
    assert elapsed < 300.0
    _report(6, f"smooth slope = {diag.slope:.3f} <= -0.8; hinge slope = "
               f"{diag_h.slope:.3f} <= -0.4; terminal gap {terminal:.2e} <= "
               f"eta*sqrt(delta) + C k^-1/2 = {envelope:.2e} (C={c_fit:.3f}); "
               f"total {elapsed:.0f}s (< 300s)")


def test_criterion_7_strong_convexity_witness():
    x = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    y = np.array([3.0, 3.0])
    prob = DroProblem(
        data=SampleSet(points=x, labels=y), cost=identity_cost(),
        loss=make_squared_loss(), delta=0.3, r_beta=1.0,
    )
    nonrobust_hessian = 2.0 * x.T @ x / 2.0
    nonrobust_min = float(np.linalg.eigvalsh(nonrobust_hessian)[0])
    assert nonrobust_min <= 1e-8

    consts = build_constants(prob, seed=0)
    assert prob.delta < consts.delta0
    rng = np.random.default_rng(3)
    thetas = []
    while len(thetas) < 20:
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        b = rng.uniform(0.2, 1.0)
        lam = rng.uniform(consts.K1 * b, consts.K2 * b)
        if lam <= consts.K2 * prob.r_beta:
            thetas.append(Decision(beta=b * direction, lam=lam))
    probe = hessian_probe(prob, consts, thetas)
    assert probe.skipped == 0
    min_eig = min(probe.min_eigenvalues)
    assert min_eig > 0
    _report(7, f"non-robust slice min eigenvalue = {nonrobust_min:.1e} <= 1e-8; "
               f"robust FD-Hessian min eigenvalue over 20 points = {min_eig:.4f} > 0")


def test_criterion_8_weak_strong_duality(atom):
    rng = np.random.default_rng(41)
    margin = 0.0
    for _ in range(8):
        pts = rng.normal(size=(3, 1))
        labels = rng.normal(size=3)
        prob = DroProblem(
            data=SampleSet(points=pts, labels=labels), cost=identity_cost(),
            loss=make_squared_loss(), delta=float(rng.uniform(0.05, 0.3)), r_beta=1.0,
        )
        beta = np.array([float(rng.uniform(0.3, 1.0)) * (1 if rng.random() < 0.5 else -1)])
        ls = solve_lambda_star(prob, beta)
        dual_val = dual_objective(prob, Decision(beta=beta, lam=ls.value), cuts=80)
        span = float(np.max(np.abs(pts))) + 4.0
        pb = primal_bound(prob, beta, np.linspace(-span, span, 50_001))
        assert pb <= dual_val + 1e-9
        margin = max(margin, pb - dual_val)
    ls = solve_lambda_star(atom, np.ones(1), tol=1e-12)
    dual_val = dual_objective(atom, Decision(beta=np.ones(1), lam=ls.value), cuts=80)
    pb = primal_bound(atom, np.ones(1), np.linspace(-2.0, 2.0, 400_001))
    gap = dual_val - pb
    assert pb <= dual_val + 1e-9
    assert gap <= 1e-3
    _report(8, f"primal <= dual + 1e-9 on all instances (max excess {margin:.1e}); "
               f"single-atom refined duality gap = {gap:.2e} <= 1e-3")


def test_criterion_9_projection_correctness():
    data = synthetic_classification(20, 2, seed=3)
    prob = DroProblem(
        data=data, cost=identity_cost(), loss=make_logistic_loss(), delta=0.05, r_beta=1.0
    )
    consts = build_constants(prob, seed=0)
    cap = consts.K2 * prob.r_beta
    rng = np.random.default_rng(55)
    worst_oracle = 0.0
    for _ in range(50):
        b = float(rng.uniform(0.0, 2.5))
        l = float(rng.uniform(-1.5, cap + 1.5))
        proj = project_W(Decision(beta=np.array([b]), lam=l), consts, prob.r_beta)
        gb, gl = grid_project_2d(
            (b, l),
            lambda bb, ll: 0 <= bb <= prob.r_beta and consts.K1 * bb <= ll <= cap,
            trapezoid_boundary(consts.K1, consts.K2, prob.r_beta),
        )
        worst_oracle = max(
            worst_oracle, math.hypot(float(np.linalg.norm(proj.beta)) - gb, proj.lam - gl)
        )
    assert worst_oracle <= 1e-6

    worst_idem = 0.0
    worst_exp = 0.0
    for _ in range(10_000):
        v1 = np.concatenate([rng.normal(size=2) * 2, [rng.uniform(-2, cap + 2)]])
        v2 = np.concatenate([rng.normal(size=2) * 2, [rng.uniform(-2, cap + 2)]])
        p1 = project_W(Decision.from_vector(v1), consts, prob.r_beta)
        p2 = project_W(Decision.from_vector(v2), consts, prob.r_beta)
        pp1 = project_W(p1, consts, prob.r_beta)
        worst_idem = max(
            worst_idem, float(np.linalg.norm(pp1.as_vector() - p1.as_vector()))
        )
        expansion = float(
            np.linalg.norm(p1.as_vector() - p2.as_vector()) - np.linalg.norm(v1 - v2)
        )
        worst_exp = max(worst_exp, expansion)
    assert worst_idem <= 1e-12
    assert worst_exp <= 1e-12
    _report(9, f"projection vs grid oracle <= {worst_oracle:.1e} (tol 1e-6); "
               f"idempotence drift {worst_idem:.1e} and expansion excess "
               f"{worst_exp:.1e} over 1e4 pairs (tol 1e-12)")


def test_criterion_10_cli_determinism(tmp_path):
    configs = {
        "train": {
            "loss": "logistic", "delta": 0.05, "r_beta": 1.0, "data.n": 24, "data.d": 3,
            "iterations": 400, "seed": 5, "step.alpha": 0.5, "step.tau": 0.55,
        },
        "compare": {
            "loss": "hinge", "delta": 0.05, "r_beta": 1.0, "data.n": 24, "data.d": 3,
            "iterations": 400, "seed": 5, "step.alpha": 0.3, "eta": 1e-3,
        },
        "worstcase": {
            "loss": "logistic", "delta": 0.05, "r_beta": 1.0, "data.n": 12, "data.d": 2,
            "iterations": 300, "seed": 5, "delta_grid": [0.04, 0.16],
        },
        "frontier": {
            "months": 26, "assets": 3, "window_months": 24, "zeta_grid": [0.0],
            "delta_grid": [0.0, 0.004], "cost_kind": "constant", "iterations": 120,
            "seed": 5,
        },
        "constants": {
            "loss": "logistic", "delta": 0.05, "r_beta": 1.0, "data.n": 24, "data.d": 3,
            "seed": 5,
        },
        "check": {"seed": 5},
    }
    checked = []
    for cmd, cfg in configs.items():
        cfg_path = tmp_path / f"{cmd}.json"
        cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
        outs = []
        for run in (1, 2):
            out = tmp_path / f"{cmd}_{run}"
            code = cli_main([cmd, "--config", str(cfg_path), "--out", str(out)])
            assert code == 0, f"{cmd} exited {code}"
            outs.append(out)
        names = sorted(p.name for p in outs[0].iterdir())
        assert names, f"{cmd} produced no outputs"
        for name in names:
            b1 = (outs[0] / name).read_bytes()
            b2 = (outs[1] / name).read_bytes()
            assert b1 == b2, f"{cmd}/{name} not byte-identical"
        checked.append(f"{cmd}({len(names)})")
    _report(10, "byte-identical outputs across two runs: " + ", ".join(checked))
