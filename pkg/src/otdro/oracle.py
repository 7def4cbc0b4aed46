"""Independent brute-force oracles: grid searches, finite differences, a
discretized primal transport bound, and curvature probes.

Everything here is deliberately slow and simple: the only code shared with
the fast paths under test is the integrand evaluation itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dual import dual_objective, inner_objective
from .model import ConfigError, Decision, DroProblem, NumericalError

__all__ = [
    "OracleReport",
    "grid_inner_max",
    "oracle_dual_objective",
    "fd_gradient",
    "grid_min_fdelta",
    "primal_bound",
    "hessian_probe",
    "HessianProbe",
    "grid_project_2d",
    "run_check_suite",
]


@dataclass(frozen=True)
class OracleReport:
    quantity: str
    oracle_value: float
    fast_value: float
    abs_error: float
    rel_error: float
    params: dict = field(default_factory=dict)

    @staticmethod
    def compare(quantity: str, oracle_value: float, fast_value: float, **params) -> "OracleReport":
        abs_err = abs(oracle_value - fast_value)
        rel_err = abs_err / max(1.0, abs(oracle_value))
        return OracleReport(quantity, oracle_value, fast_value, abs_err, rel_err, params)


def _oracle_half_width(problem: DroProblem, lam: float, y: float, u0: float, a: float) -> float:
    """Search-interval bound recomputed locally from the growth envelope."""
    sd = problem.sqrt_delta
    eps = lam / (sd * a) - problem.loss.kappa
    if eps <= 0.0:
        return math.inf
    eps = min(eps, 1e6)
    mag = np.geomspace(1e-8, 1e6, 200)
    grid = np.concatenate([-mag[::-1], [0.0], mag])
    c_eps = float(
        np.max(problem.loss.value(grid, np.full_like(grid, y)) - (problem.loss.kappa + 0.5 * eps) * grid**2)
    )
    l0 = abs(float(problem.loss.value(0.0, y)))
    lp0 = max(abs(float(problem.loss.dminus(0.0, y))), abs(float(problem.loss.dplus(0.0, y))))
    bound = math.sqrt(max(0.0, 2.0 / eps * (c_eps + l0 + lp0 * abs(u0)))) + 4.0 * (
        problem.loss.kappa + eps
    ) / eps * abs(u0)
    return 1.5 * bound / (sd * a)


def _parabolic_refine(gs: np.ndarray, vals: np.ndarray, j: int) -> float:
    """Vertex of the parabola through the three grid points around index j."""
    if j <= 0 or j >= len(gs) - 1:
        return float(gs[j])
    denom = vals[j + 1] - 2.0 * vals[j] + vals[j - 1]
    if denom >= 0.0:
        return float(gs[j])
    step = gs[1] - gs[0]
    shift = 0.5 * step * (vals[j - 1] - vals[j + 1]) / denom
    return float(gs[j] + np.clip(shift, -step, step))


def grid_inner_max(
    problem: DroProblem, theta: Decision, x_index: int, points: int = 100_000
) -> tuple[float, float]:
    """Dense-grid maximization of the dual integrand with one polish step."""
    if not np.any(theta.beta):
        y = problem.data.label_or_nan(x_index)
        return 0.0, float(problem.loss.value(0.0, y)) + theta.lam * problem.sqrt_delta
    x = problem.data.points[x_index]
    y = problem.data.label_or_nan(x_index)
    u0 = float(theta.beta @ x)
    a = problem.cost.quad(theta.beta, x_index)
    half = _oracle_half_width(problem, theta.lam, y, u0, a)
    if not math.isfinite(half):
        raise NumericalError("no compact search interval at this multiplier")
    sd = problem.sqrt_delta
    gs = np.linspace(-half, half, max(int(points), 5))
    u = u0 + gs * sd * a
    vals = np.asarray(problem.loss.value(u, np.full_like(u, y))) - theta.lam * sd * (
        gs * gs * a - 1.0
    )
    j = int(np.argmax(vals))
    g = _parabolic_refine(gs, vals, j)
    v_ref = inner_objective(problem, g, theta, x_index)
    if v_ref >= vals[j]:
        return g, float(v_ref)
    return float(gs[j]), float(vals[j])


def oracle_dual_objective(
    problem: DroProblem, theta: Decision, gamma_points: int = 2001
) -> float:
    """Grid-based evaluation of the dual objective, independent of bisection.

    The per-sample search interval is grown until the grid argmax sits well
    inside it with the endpoints clearly below the maximum; above the domain
    threshold the integrand decays at both ends so the expansion terminates,
    and +inf is returned when it does not (the supremum diverges there).
    """
    n = problem.data.n
    sd = problem.sqrt_delta
    beta, lam = theta.beta, theta.lam
    if not np.any(beta):
        y = problem.data.labels_or_nan()
        return float(np.mean(problem.loss.value(np.zeros(n), y))) + lam * sd
    a = problem.cost.quad_all(beta, n)
    u0 = problem.index_values(beta)
    y = problem.data.labels_or_nan()
    m = gamma_points
    ts = np.linspace(-1.0, 1.0, m)
    halves = (1.0 + np.abs(u0)) / (sd * a) + 1.0 / np.sqrt(sd * a)
    edge = max(3, m // 20)
    for _ in range(60):
        gs = halves[:, None] * ts[None, :]
        u = u0[:, None] + gs * sd * a[:, None]
        vals = np.asarray(problem.loss.value(u, np.broadcast_to(y[:, None], u.shape)))
        vals = vals - lam * sd * (gs * gs * a[:, None] - 1.0)
        j = np.argmax(vals, axis=1)
        vmax = vals[np.arange(n), j]
        margin = 1e-9 * (1.0 + np.abs(vmax))
        bad = (j < edge) | (j >= m - edge)
        bad |= vals[:, 0] > vmax - margin
        bad |= vals[:, -1] > vmax - margin
        if not np.any(bad):
            break
        halves = np.where(bad, 4.0 * halves, halves)
    else:
        return math.inf
    total = 0.0
    for i in range(n):
        g = _parabolic_refine(gs[i], vals[i], int(j[i]))
        total += max(float(vmax[i]), inner_objective(problem, g, theta, i))
    return total / n


def fd_gradient(
    problem: DroProblem, theta: Decision, h: Optional[float] = None, cuts: int = 80
) -> tuple[np.ndarray, float]:
    """Central finite differences of the dual objective."""
    v = theta.as_vector()
    if h is None:
        h = 1e-5 * (1.0 + float(np.linalg.norm(v)))
    grad = np.zeros_like(v)
    for p in range(len(v)):
        vp, vm = v.copy(), v.copy()
        vp[p] += h
        vm[p] -= h
        fp = dual_objective(problem, Decision.from_vector(vp), cuts=cuts)
        fm = dual_objective(problem, Decision.from_vector(vm), cuts=cuts)
        grad[p] = (fp - fm) / (2.0 * h)
    return grad[:-1], float(grad[-1])


def grid_min_fdelta(
    problem: DroProblem,
    beta_box: Sequence[tuple],
    lambda_interval: tuple,
    resolution: int = 41,
    refine_rounds: int = 3,
    gamma_points: int = 2001,
) -> tuple[Decision, float]:
    """Zoomed dense-grid minimization of the dual objective (desk scale, d <= 2)."""
    if len(beta_box) > 2:
        raise ConfigError("grid minimization is limited to d <= 2")
    lo = np.array([b[0] for b in beta_box] + [lambda_interval[0]], dtype=float)
    hi = np.array([b[1] for b in beta_box] + [lambda_interval[1]], dtype=float)
    dims = len(lo)
    best_v, best_f = None, math.inf
    for _ in range(max(int(refine_rounds), 1)):
        axes = [np.linspace(lo[p], hi[p], resolution) for p in range(dims)]
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.stack([m.ravel() for m in mesh], axis=1)
        for row in flat:
            lam = row[-1]
            if lam < 0:
                continue
            f = oracle_dual_objective(
                problem, Decision(beta=row[:-1], lam=lam), gamma_points=gamma_points
            )
            if f < best_f:
                best_f, best_v = f, row.copy()
        span = (hi - lo) / (resolution - 1)
        lo = np.maximum(lo, best_v - 2.0 * span)
        hi = np.minimum(hi, best_v + 2.0 * span)
    return Decision(beta=best_v[:-1], lam=float(best_v[-1])), float(best_f)


def primal_bound(problem: DroProblem, beta: np.ndarray, support_grid: Sequence[float]) -> float:
    """Lower bound on the worst-case objective from a discretized transport plan.

    Candidate destinations are restricted to ``support_grid``; each atom's
    mass is assigned by bisection on the budget multiplier, splitting a single
    atom between its two tied choices to exhaust the budget exactly.  Feasible
    by construction, hence always a weak-duality lower bound.
    """
    if problem.data.d != 1:
        raise ConfigError("primal transport bound is limited to d = 1")
    if problem.data.n > 5:
        raise ConfigError("primal transport bound is limited to n <= 5")
    beta = np.asarray(beta, dtype=float)
    zs = np.asarray(support_grid, dtype=float).ravel()
    n = problem.data.n
    y = problem.data.labels_or_nan()
    v = np.stack(
        [np.asarray(problem.loss.value(beta[0] * zs, np.full_like(zs, y[i]))) for i in range(n)]
    )
    c = np.stack(
        [
            np.array([problem.cost.cost(i, problem.data.points[i], np.array([z])) for z in zs])
            for i in range(n)
        ]
    )
    if float(np.mean(np.min(c, axis=1))) > problem.delta + 1e-12:
        raise NumericalError("support grid infeasible: no destination within budget")

    def plans(mult: float):
        s = v - mult * c
        mx = np.max(s, axis=1, keepdims=True)
        tie = s >= mx - 1e-11 * (1.0 + np.abs(mx))
        cheap_cost = np.where(tie, c, np.inf).min(axis=1)
        rich_cost = np.where(tie, c, -np.inf).max(axis=1)
        cheap_val = np.array(
            [v[i][tie[i] & (c[i] == cheap_cost[i])].max() for i in range(n)]
        )
        rich_val = np.array([v[i][tie[i] & (c[i] == rich_cost[i])].max() for i in range(n)])
        return (
            float(np.mean(cheap_cost)),
            float(np.mean(cheap_val)),
            float(np.mean(rich_cost)),
            float(np.mean(rich_val)),
        )

    spend0, val0, spend0_rich, val0_rich = plans(0.0)
    if spend0_rich <= problem.delta:
        return val0_rich
    if spend0 <= problem.delta:
        # value ties at mult = 0; mix toward the rich plan up to the budget
        w = (problem.delta - spend0) / max(spend0_rich - spend0, 1e-300)
        w = min(max(w, 0.0), 1.0)
        return (1.0 - w) * val0 + w * val0_rich

    lo, hi = 0.0, 1.0
    for _ in range(200):
        if plans(hi)[0] <= problem.delta:
            break
        hi *= 2.0
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if plans(mid)[0] <= problem.delta:
            hi = mid
        else:
            lo = mid
    spend_c, val_c, spend_r, val_r = plans(hi)
    if spend_r <= problem.delta:
        return val_r
    w = (problem.delta - spend_c) / max(spend_r - spend_c, 1e-300)
    w = min(max(w, 0.0), 1.0)
    return (1.0 - w) * val_c + w * val_r


@dataclass(frozen=True)
class HessianProbe:
    min_eigenvalues: list
    beta_block_min_eigenvalues: list
    beta_curvature_bounds: list  # sqrt(delta) * kappa0 / lambda per sample
    skipped: int


def hessian_probe(
    problem: DroProblem,
    consts,
    theta_samples: Sequence[Decision],
    h: Optional[float] = None,
    cuts: int = 80,
) -> HessianProbe:
    """Finite-difference Hessians of the dual objective at sampled decisions."""
    min_eigs, beta_eigs, bounds = [], [], []
    skipped = 0
    for theta in theta_samples:
        v = theta.as_vector()
        dim = len(v)
        step = h if h is not None else 1e-4 * (1.0 + float(np.linalg.norm(v)))

        def f(vec):
            return dual_objective(problem, Decision.from_vector(vec), cuts=cuts)

        f0 = f(v)
        hess = np.zeros((dim, dim))
        ok = math.isfinite(f0)
        for p in range(dim):
            if not ok:
                break
            ep = np.zeros(dim)
            ep[p] = step
            fp, fm = f(v + ep), f(v - ep)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                ok = False
                break
            hess[p, p] = (fp - 2.0 * f0 + fm) / step**2
            for q in range(p + 1, dim):
                eq = np.zeros(dim)
                eq[q] = step
                fpp, fpm = f(v + ep + eq), f(v + ep - eq)
                fmp, fmm = f(v - ep + eq), f(v - ep - eq)
                if not all(math.isfinite(t) for t in (fpp, fpm, fmp, fmm)):
                    ok = False
                    break
                hess[p, q] = hess[q, p] = (fpp - fpm - fmp + fmm) / (4.0 * step**2)
        if not ok:
            skipped += 1
            continue
        eig = np.linalg.eigvalsh(hess)
        min_eigs.append(float(eig[0]))
        beig = np.linalg.eigvalsh(hess[:-1, :-1])
        beta_eigs.append(float(beig[0]))
        bounds.append(problem.sqrt_delta * consts.kappa0 / theta.lam)
    return HessianProbe(
        min_eigenvalues=min_eigs,
        beta_block_min_eigenvalues=beta_eigs,
        beta_curvature_bounds=bounds,
        skipped=skipped,
    )


def grid_project_2d(
    target: tuple,
    feasible: Callable[[float, float], bool],
    curves: Sequence[tuple],
    points: int = 200_001,
    rounds: int = 3,
) -> tuple[float, float]:
    """Nearest feasible point in the plane by dense scans of the boundary.

    ``curves`` parameterizes the boundary as (fn, t_lo, t_hi) pieces with
    vectorized fn: t -> (b(t), l(t)).  A feasible target projects to itself;
    otherwise each curve is scanned on a dense parameter grid and the best
    parameter window is rescanned ``rounds`` times (a 1-D zoom has no
    transverse flat-valley problem, so the location converges geometrically).
    """
    b0, l0 = target
    if feasible(b0, l0):
        return float(b0), float(l0)
    best, best_d = None, math.inf
    for fn, tlo, thi in curves:
        lo, hi = float(tlo), float(thi)
        for _ in range(max(int(rounds), 1)):
            ts = np.linspace(lo, hi, points)
            bb, ll = fn(ts)
            d2 = (np.asarray(bb) - b0) ** 2 + (np.asarray(ll) - l0) ** 2
            j = int(np.argmin(d2))
            step = (hi - lo) / (points - 1)
            lo = max(float(tlo), ts[j] - 2 * step)
            hi = min(float(thi), ts[j] + 2 * step)
        if d2[j] < best_d:
            best_d = float(d2[j])
            best = (float(np.asarray(bb)[j]), float(np.asarray(ll)[j]))
    if best is None:
        raise NumericalError("boundary projection: no curves supplied")
    return best


def trapezoid_boundary(k1: float, k2: float, r: float) -> list:
    """Boundary curves of {0 <= b <= r, k1*b <= l <= k2*r} for grid_project_2d."""
    cap = k2 * r
    return [
        (lambda t: (t, k1 * t), 0.0, r),
        (lambda t: (np.full_like(t, r), t), k1 * r, cap),
        (lambda t: (t, np.full_like(t, cap)), 0.0, r),
        (lambda t: (np.zeros_like(t), t), 0.0, cap),
    ]


def parabola_band_boundary(q: float, eta: float, r: float, l_max: float) -> list:
    """Boundary curves of {0 <= b <= r, l >= q*b^2 + eta} for grid_project_2d."""
    return [
        (lambda t: (t, q * t * t + eta), 0.0, r),
        (lambda t: (np.full_like(t, r), t), q * r * r + eta, l_max),
        (lambda t: (np.zeros_like(t), t), eta, l_max),
    ]


def run_check_suite(seed: int = 0) -> dict:
    """Cross-validate the fast paths against every oracle; returns a report dict."""
    from .model import (
        SampleSet,
        identity_cost,
        make_logistic_loss,
        make_squared_loss,
    )
    from .dual import inner_maximize, robust_loss_batch, squared_loss_closed_form
    from .optimizer import solve_lambda_star
    from .regions import build_constants, project_W
    from .worstcase import worst_case

    rng = np.random.default_rng(seed)
    checks = []

    def record(name, metric, threshold, **extra):
        entry = {"name": name, "metric": metric, "threshold": threshold,
                 "pass": bool(metric <= threshold), **extra}
        checks.append(entry)

    # squared loss: bisection vs closed form
    worst = 0.0
    for _ in range(200):
        x = rng.normal(size=(1, 1)) * 2.0
        yv = rng.normal(size=1)
        data = SampleSet(points=x, labels=yv)
        delta = float(rng.uniform(0.05, 0.5))
        prob = DroProblem(data=data, cost=identity_cost(), loss=make_squared_loss(),
                          delta=delta, r_beta=3.0)
        beta = rng.uniform(-2.0, 2.0, size=1)
        a = float(beta @ beta)
        lam = math.sqrt(delta) * a * (1.0 + rng.uniform(0.2, 3.0)) + rng.uniform(0.01, 1.0)
        theta = Decision(beta=beta, lam=lam)
        fast = inner_maximize(prob, theta, 0, cuts=60).lrob
        ref = squared_loss_closed_form(prob, theta, 0)
        worst = max(worst, abs(fast - ref))
    record("squared_closed_form_vs_bisection", worst, 1e-8, instances=200)

    # logistic: analytic gradient vs finite differences
    data = SampleSet(points=rng.normal(size=(20, 3)),
                     labels=np.where(rng.random(20) < 0.5, -1.0, 1.0))
    prob = DroProblem(data=data, cost=identity_cost(), loss=make_logistic_loss(),
                      delta=0.05, r_beta=2.0)
    consts = build_constants(prob, seed=seed)
    from .dual import grad_robust_loss
    worst = 0.0
    for _ in range(10):
        bdir = rng.normal(size=3)
        beta = bdir / np.linalg.norm(bdir) * rng.uniform(0.3, 1.8)
        bnorm = float(np.linalg.norm(beta))
        lam = rng.uniform(consts.K1 * bnorm, consts.K2 * prob.r_beta)
        theta = Decision(beta=beta, lam=lam)
        batch = robust_loss_batch(prob, theta, cuts=80)
        gb = np.zeros(3)
        gl = 0.0
        for i in range(prob.data.n):
            inner = inner_maximize(prob, theta, i, cuts=80, consts=consts)
            s = grad_robust_loss(prob, theta, i, inner)
            gb += s.d_beta / prob.data.n
            gl += s.d_lambda / prob.data.n
        fdb, fdl = fd_gradient(prob, theta)
        num = np.linalg.norm(np.concatenate([gb - fdb, [gl - fdl]]))
        den = max(1.0, np.linalg.norm(np.concatenate([fdb, [fdl]])))
        worst = max(worst, num / den)
    record("logistic_gradient_vs_fd", worst, 1e-5, points=10)

    # inner maximization vs dense grid
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(1, 2))
        data = SampleSet(points=x, labels=np.array([1.0 if rng.random() < 0.5 else -1.0]))
        prob = DroProblem(data=data, cost=identity_cost(), loss=make_logistic_loss(),
                          delta=float(rng.uniform(0.02, 0.3)), r_beta=2.0)
        beta = rng.normal(size=2)
        beta *= rng.uniform(0.2, 1.5) / np.linalg.norm(beta)
        theta = Decision(beta=beta, lam=float(rng.uniform(0.05, 1.5)))
        fast = inner_maximize(prob, theta, 0, cuts=60)
        _, v = grid_inner_max(prob, theta, 0, points=100_000)
        worst = max(worst, abs(fast.lrob - v))
    record("inner_max_vs_grid", worst, 1e-6, instances=100)

    # weak duality on the one-atom squared instance
    data = SampleSet(points=np.zeros((1, 1)), labels=np.ones(1))
    prob = DroProblem(data=data, cost=identity_cost(), loss=make_squared_loss(),
                      delta=0.25, r_beta=1.5)
    beta = np.ones(1)
    ls = solve_lambda_star(prob, beta)
    dual_val = dual_objective(prob, Decision(beta=beta, lam=ls.value), cuts=80)
    zs = np.linspace(-2.0, 2.0, 200_001)
    pb = primal_bound(prob, beta, zs)
    record("weak_duality_gap", dual_val - pb, 1e-3, primal=pb, dual=dual_val)
    record("weak_duality_sign", max(0.0, pb - dual_val), 1e-9)

    # projection vs planar grid oracle
    consts_sq = build_constants(prob, seed=seed)
    worst = 0.0
    for _ in range(25):
        b = float(rng.uniform(0.0, 3.0))
        l = float(rng.uniform(-2.0, 2.0 + consts_sq.K2 * prob.r_beta))
        theta = Decision(beta=np.array([b]), lam=l)
        proj = project_W(theta, consts_sq, prob.r_beta)
        gb, gl = grid_project_2d(
            (b, l),
            lambda bb, ll: 0 <= bb <= prob.r_beta
            and consts_sq.K1 * bb <= ll <= consts_sq.K2 * prob.r_beta,
            trapezoid_boundary(consts_sq.K1, consts_sq.K2, prob.r_beta),
        )
        worst = max(worst, math.hypot(float(np.linalg.norm(proj.beta)) - gb, proj.lam - gl))
    record("projection_vs_grid_oracle", worst, 1e-6, slices=25)

    # worst-case budget saturation
    pts = rng.normal(size=(16, 2))
    labels = np.where(pts @ np.array([1.0, -0.5]) > 0, 1.0, -1.0)
    prob = DroProblem(data=SampleSet(points=pts, labels=labels), cost=identity_cost(),
                      loss=make_logistic_loss(), delta=0.05, r_beta=1.0)
    wc = worst_case(prob, np.array([0.8, -0.4]))
    record("worstcase_budget_saturation", abs(wc.budget - prob.delta), 1e-6 * prob.delta,
           regime=wc.regime)

    return {"seed": seed, "passed": all(c["pass"] for c in checks), "checks": checks}
