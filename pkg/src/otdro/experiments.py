"""Desk-scale experiment drivers: robust-vs-plain convergence comparisons,
worst-case evolution sweeps, and the rolling mean-variance frontier backtest.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dual import dual_objective
from .model import (
    ConfigError,
    Decision,
    DroProblem,
    LossPiece,
    LossSpec,
    SampleSet,
    identity_cost,
    load_csv,
    make_hinge_loss,
    make_logistic_loss,
    make_squared_loss,
    scaled_identity_cost,
)
from .optimizer import RunTrace, StepSchedule, sgd_nonsmooth, sgd_smooth
from .regions import build_constants
from .worstcase import comparative_statics

__all__ = [
    "FrontierPoint",
    "synthetic_classification",
    "synthetic_regression",
    "synthetic_market",
    "plain_sgd",
    "run_supervised_experiment",
    "run_worstcase_trace",
    "run_portfolio_frontier",
]

LOSS_FACTORIES = {
    "logistic": make_logistic_loss,
    "squared": make_squared_loss,
    "hinge": make_hinge_loss,
}


def synthetic_classification(n: int, d: int, seed: int, separation: float = 2.0) -> SampleSet:
    """Two Gaussian classes with opposite means and unit covariance."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    labels = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    mu = np.full(d, separation / math.sqrt(d))
    points = rng.standard_normal((n, d)) + labels[:, None] * mu[None, :]
    return SampleSet(points=points, labels=labels)


def synthetic_regression(n: int, d: int, seed: int, noise: float = 0.5) -> SampleSet:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 202)))
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    points = rng.standard_normal((n, d))
    labels = points @ w + noise * rng.standard_normal(n)
    return SampleSet(points=points, labels=labels)


def synthetic_market(months: int, assets: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Correlated monthly returns plus a volatility index; for CI and demos."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 303)))
    load = rng.uniform(0.4, 1.0, size=assets)
    vol_state = 0.04 + 0.02 * np.abs(np.sin(np.arange(months) / 7.0 + rng.uniform(0, 3)))
    common = rng.standard_normal(months)
    idio = rng.standard_normal((months, assets))
    drift = rng.uniform(0.002, 0.008, size=assets)
    rets = drift[None, :] + vol_state[:, None] * (
        0.6 * common[:, None] * load[None, :] + 0.8 * idio
    )
    vix = 100.0 * vol_state * rng.uniform(0.9, 1.1, size=months)
    return rets, vix


def _build_data(config: dict) -> SampleSet:
    if "data.csv" in config:
        return load_csv(config["data.csv"], {"label": config.get("data.label")})
    kind = config.get("data.synthetic", "classification")
    n = int(config.get("data.n", 256))
    d = int(config.get("data.d", 8))
    seed = int(config.get("seed", 0))
    if kind == "classification":
        return synthetic_classification(n, d, seed)
    if kind == "regression":
        return synthetic_regression(n, d, seed)
    raise ConfigError(f"unknown synthetic data kind {kind!r}")


def build_problem(config: dict) -> DroProblem:
    data = _build_data(config)
    loss_name = config.get("loss", "logistic")
    if loss_name not in LOSS_FACTORIES:
        raise ConfigError(f"unknown loss {loss_name!r}")
    cost_kind = config.get("cost", "identity")
    if cost_kind == "identity":
        cost = identity_cost()
    elif cost_kind == "scaled-identity":
        vols = config.get("cost.volatilities")
        if vols is None:
            raise ConfigError("scaled-identity cost needs cost.volatilities")
        cost = scaled_identity_cost(vols)
    else:
        raise ConfigError(f"unknown cost kind {cost_kind!r}")
    return DroProblem(
        data=data,
        cost=cost,
        loss=LOSS_FACTORIES[loss_name](),
        delta=float(config.get("delta", 0.1)),
        r_beta=float(config.get("r_beta", 1.0)),
    )


def schedule_from_config(config: dict, prefix: str = "step") -> StepSchedule:
    return StepSchedule(
        alpha=float(config.get(f"{prefix}.alpha", 0.5)),
        tau=float(config.get(f"{prefix}.tau", 0.55)),
    )


def plain_sgd(
    problem: DroProblem,
    schedule: StepSchedule,
    xi: float,
    iterations: int,
    seed: int,
    eval_every: Optional[int] = None,
) -> RunTrace:
    """Projected SGD on the non-robust empirical loss over beta alone.

    Consumes the same uniform sample-index stream as the robust run with the
    same seed (matching each variant's stream layout), so the two arms form a
    paired comparison.
    """
    rng_draw = None
    if problem.loss.smooth:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
    else:
        ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(ss[0])
        rng_draw = np.random.default_rng(ss[1])
    d = problem.data.d
    beta = np.zeros(d)
    bar = beta.copy()
    r = problem.r_beta
    y_all = problem.data.labels_or_nan()
    every = eval_every or max(1, math.ceil(iterations / 200))
    trace = RunTrace(seed=seed, iterations=iterations, meta={"variant": "plain"})

    def emp_loss(b):
        u = problem.data.points @ b
        return float(np.mean(problem.loss.value(u, y_all)))

    import time

    t0 = time.perf_counter()
    for k in range(1, iterations + 1):
        i = int(rng.integers(problem.data.n))
        x = problem.data.points[i]
        u = float(beta @ x)
        y = y_all[i]
        lo_d, hi_d = problem.loss.subgradient_interval(u, y)
        lo_d, hi_d = float(lo_d), float(hi_d)
        if rng_draw is not None and hi_d > lo_d:
            lp = float(rng_draw.uniform(lo_d, hi_d))
        else:
            lp = hi_d
        beta = beta - schedule.step(k) * lp * x
        nrm = float(np.linalg.norm(beta))
        if nrm > r:
            beta = beta * (r / nrm)
        w = (xi + 1.0) / (k + xi)
        bar = (1.0 - w) * bar + w * beta
        if k % every == 0 or k == iterations:
            trace.checkpoints.append(
                _plain_checkpoint(k, beta, bar, emp_loss(beta), emp_loss(bar), t0)
            )
    trace.final = Decision(beta=beta, lam=0.0)
    trace.final_bar = Decision(beta=bar, lam=0.0)
    return trace


def _plain_checkpoint(k, beta, bar, f, f_bar, t0):
    import time

    from .optimizer import Checkpoint

    return Checkpoint(
        k=k,
        theta=np.concatenate([beta, [0.0]]),
        theta_bar=np.concatenate([bar, [0.0]]),
        f_delta=f,
        f_delta_bar=f_bar,
        cuts=0,
        elapsed_s=time.perf_counter() - t0,
    )


@dataclass
class SupervisedResult:
    problem: DroProblem
    trace_dro: RunTrace
    trace_plain: RunTrace
    rows: list = field(default_factory=list)  # per-checkpoint gap records


def run_supervised_experiment(config: dict) -> SupervisedResult:
    """Robust and plain SGD on the same data with identical step sizes and seeds.

    Emits per-checkpoint optimality gaps for both arms, each measured against
    the smallest objective value observed along its own trace (the usual
    long-run proxy when no closed-form optimum exists).
    """
    problem = build_problem(config)
    schedule = schedule_from_config(config)
    iterations = int(config.get("iterations", 20_000))
    seed = int(config.get("seed", 0))
    xi = float(config.get("step.xi", 0.0))

    if problem.loss.name == "hinge":
        eta = float(config.get("eta", 1e-3))
        nonsmooth_schedule = StepSchedule(alpha=schedule.alpha, tau=0.5)
        trace_dro = sgd_nonsmooth(
            problem, nonsmooth_schedule, eta=eta, xi=max(xi, 1.0), iterations=iterations, seed=seed
        )
        plain_schedule = nonsmooth_schedule
        plain_xi = max(xi, 1.0)
    else:
        consts = build_constants(problem, seed=seed)
        trace_dro = sgd_smooth(
            problem, consts, schedule, xi=xi, iterations=iterations, seed=seed
        )
        plain_schedule = schedule
        plain_xi = xi
    trace_plain = plain_sgd(problem, plain_schedule, plain_xi, iterations, seed)

    rows = []
    f_best_dro = min(
        c.f_delta_bar for c in trace_dro.checkpoints if c.f_delta_bar is not None
    )
    f_best_plain = min(
        c.f_delta_bar for c in trace_plain.checkpoints if c.f_delta_bar is not None
    )
    for cd, cp in zip(trace_dro.checkpoints, trace_plain.checkpoints):
        rows.append(
            {
                "k": cd.k,
                "f_dro_bar": cd.f_delta_bar,
                "gap_dro": max(cd.f_delta_bar - f_best_dro, 0.0),
                "f_plain_bar": cp.f_delta_bar,
                "gap_plain": max(cp.f_delta_bar - f_best_plain, 0.0),
            }
        )
    return SupervisedResult(problem=problem, trace_dro=trace_dro, trace_plain=trace_plain, rows=rows)


@dataclass
class WorstCaseTraceResult:
    problem: DroProblem
    beta: np.ndarray
    rows: list
    misclassification: list
    statics: object


def run_worstcase_trace(config: dict) -> WorstCaseTraceResult:
    """Fix a decision vector, sweep the budget grid, and tabulate the
    transported samples together with the misclassification rate per budget."""
    problem = build_problem(config)
    seed = int(config.get("seed", 0))
    if "beta" in config:
        beta = np.asarray(config["beta"], dtype=float)
        if beta.shape != (problem.data.d,):
            raise ConfigError("beta length does not match the data dimension")
    else:
        schedule = schedule_from_config(config)
        trace = plain_sgd(problem, schedule, 0.0, int(config.get("iterations", 5000)), seed)
        beta = trace.final_bar.beta
    delta_grid = [float(d) for d in config.get("delta_grid", [0.01, 0.04, 0.09, 0.16, 0.25])]
    if any(d <= 0 for d in delta_grid):
        raise ConfigError("delta_grid entries must be positive")

    stats = comparative_statics(problem, beta, delta_grid)
    y = problem.data.labels_or_nan()
    classification = problem.data.labels is not None and set(np.unique(y)) <= {-1.0, 1.0}

    rows = []
    mis_rows = []
    # delta = 0 row: the raw data
    u0 = problem.index_values(beta)
    loss0 = np.asarray(problem.loss.value(u0, y), dtype=float)
    for i in range(problem.data.n):
        rows.append(_wc_row(0.0, i, problem.data.points[i], 0.0, problem.data.points[i], 0.0,
                            float(loss0[i]), float(loss0[i])))
    if classification:
        mis_rows.append({"delta": 0.0, "misclassification_rate": float(np.mean(np.sign(u0) != y))})
    for d_val, wc in zip(stats.deltas, stats.transports):
        if wc.X_star is None:
            continue
        u_star = wc.X_star @ beta
        loss_star = np.asarray(problem.loss.value(u_star, y), dtype=float)
        for i in range(problem.data.n):
            rows.append(
                _wc_row(
                    float(d_val),
                    i,
                    problem.data.points[i],
                    float(wc.G[i]),
                    wc.X_star[i],
                    float(np.linalg.norm(wc.X_star[i] - problem.data.points[i])),
                    float(loss0[i]),
                    float(loss_star[i]),
                )
            )
        if classification:
            mis_rows.append(
                {
                    "delta": float(d_val),
                    "misclassification_rate": float(np.mean(np.sign(u_star) != y)),
                }
            )
    return WorstCaseTraceResult(
        problem=problem, beta=beta, rows=rows, misclassification=mis_rows, statics=stats
    )


def _wc_row(delta, i, x, g, x_star, displacement, loss_before, loss_after):
    row = {"delta": delta, "i": i}
    for j, v in enumerate(np.asarray(x, dtype=float)):
        row[f"x_{j}"] = float(v)
    row["G"] = g
    for j, v in enumerate(np.asarray(x_star, dtype=float)):
        row[f"xstar_{j}"] = float(v)
    row["displacement"] = displacement
    row["loss_before"] = loss_before
    row["loss_after"] = loss_after
    return row


# --- portfolio ---------------------------------------------------------------


@dataclass(frozen=True)
class FrontierPoint:
    zeta: float
    delta: float
    mean_return: float
    std_return: float
    cost_kind: str


def _mean_variance_loss(zeta: float, mu: float) -> LossSpec:
    """(v + y - mu)^2 - zeta*(v + y) as a loss in the reduced index v with the
    eliminated asset's return riding along as the untransported label y."""

    def value(v, y):
        v = np.asarray(v, dtype=float)
        y = np.asarray(y, dtype=float)
        u = v + y
        return (u - mu) ** 2 - zeta * u

    def deriv(v, y):
        v = np.asarray(v, dtype=float)
        y = np.asarray(y, dtype=float)
        return 2.0 * (v + y - mu) - zeta

    def d2(v, y):
        v = np.asarray(v, dtype=float)
        return np.full_like(v, 2.0)

    piece = LossPiece(value=value, deriv=deriv, d2=d2)
    return LossSpec(
        name="mean-variance",
        value=value,
        dplus=deriv,
        dminus=deriv,
        d2=d2,
        components=(piece,),
        kappa=1.0,
        second_derivative_bound=2.0,
        k1=0.0,
        k2=1.0,
    )


def _reduce_window(window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eliminate the full-investment constraint: weights of the first d-1
    assets are free, the last takes the remainder.  Returns (Z, y) where the
    index is w'Z + y."""
    z = window[:, :-1] - window[:, -1:]
    y = window[:, -1]
    return z, y


def _solve_window_plain(z, y, zeta, r_beta, iterations=40_000) -> np.ndarray:
    """Exact solve of the delta = 0 window (a quadratic in the free weights
    and the mean parameter); projected gradient descent only if the weight
    ball binds."""
    n, dm1 = z.shape
    design = np.concatenate([z, -np.ones((n, 1))], axis=1)  # index minus mean
    hess = (2.0 / n) * design.T @ design
    lin = np.concatenate([np.mean(z, axis=0), [0.0]])
    rhs = zeta * lin - (2.0 / n) * design.T @ y
    p = np.linalg.lstsq(hess, rhs, rcond=None)[0]
    w = p[:dm1]
    if float(np.linalg.norm(w)) <= r_beta:
        return w

    w = np.zeros(dm1)
    mu = float(np.mean(y))
    step = 0.5 / max(1.0, float(np.linalg.norm(design, 2)) ** 2 / n)
    for _ in range(iterations):
        u = z @ w + y
        gw = (2.0 * z.T @ (u - mu) - zeta * np.sum(z, axis=0)) / n
        gm = float(np.mean(-2.0 * (u - mu)))
        w = w - step * gw
        mu = mu - step * gm
        nrm = float(np.linalg.norm(w))
        if nrm > r_beta:
            w = w * (r_beta / nrm)
    return w


def _solve_window_dro(
    z,
    y,
    zeta,
    delta,
    r_beta,
    cost,
    iterations,
    seed,
    mu_iters: int = 14,
    theta0: Optional[Decision] = None,
) -> tuple[np.ndarray, Optional[Decision]]:
    """Golden-section over the mean parameter, re-solving the robust problem
    per probe with common random numbers."""
    data = SampleSet(points=z, labels=y)
    schedule = StepSchedule(alpha=0.25, tau=0.55)
    spread = float(np.std(y)) + 1e-3
    lo = float(np.mean(y)) - 6.0 * spread - abs(zeta)
    hi = float(np.mean(y)) + 6.0 * spread + abs(zeta)
    cache: dict[float, tuple[float, Decision]] = {}

    def probe(mu: float) -> float:
        if mu not in cache:
            problem = DroProblem(
                data=data, cost=cost, loss=_mean_variance_loss(zeta, mu),
                delta=delta, r_beta=r_beta,
            )
            consts = build_constants(problem, sphere_samples=32, refine_steps=10, seed=seed)
            trace = sgd_smooth(
                problem, consts, schedule, xi=0.0, iterations=iterations, seed=seed,
                theta0=theta0, eval_every=iterations, floor_eta=1e-4 * problem.sqrt_delta,
            )
            val = dual_objective(problem, trace.final_bar, cuts=60, consts=consts)
            cache[mu] = (val - zeta * mu, trace.final_bar)
        return cache[mu][0]

    inv_golden = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - inv_golden * (hi - lo)
    d = lo + inv_golden * (hi - lo)
    for _ in range(mu_iters):
        if probe(c) <= probe(d):
            hi = d
        else:
            lo = c
        c = hi - inv_golden * (hi - lo)
        d = lo + inv_golden * (hi - lo)
    best_mu = min(cache, key=lambda m: cache[m][0])
    dec = cache[best_mu][1]
    return dec.beta, dec


def run_portfolio_frontier(
    returns: np.ndarray,
    vols: np.ndarray,
    window_months: int,
    zeta_grid,
    delta_grid,
    cost_kind: str = "both",
    r_beta: float = 5.0,
    iterations: int = 1200,
    seed: int = 0,
) -> list[FrontierPoint]:
    """Rolling-window mean-variance backtest over (zeta, delta, cost) cells.

    Per month the trailing window forms the empirical baseline; weights are
    held one month and the realized return recorded.  delta = 0 cells solve
    the plain mean-variance problem; positive budgets run the robust solver
    with either a constant identity cost or the volatility-scaled cost.
    """
    returns = np.asarray(returns, dtype=float)
    vols = np.asarray(vols, dtype=float).ravel()
    if returns.ndim != 2:
        raise ConfigError("returns must be a (months, assets) array")
    if np.any(~np.isfinite(returns)) or np.any(~np.isfinite(vols)):
        raise ConfigError("returns/volatility series contain non-finite values")
    if len(vols) != returns.shape[0]:
        raise ConfigError("volatility series length does not match returns")
    if window_months < 24:
        raise ConfigError("window must cover at least 24 months")
    if returns.shape[0] <= window_months:
        raise ConfigError("history shorter than the training window")
    kinds = ["constant", "implied-vol-scaled"] if cost_kind == "both" else [cost_kind]
    for k in kinds:
        if k not in ("constant", "implied-vol-scaled"):
            raise ConfigError(f"unknown cost kind {k!r}")

    months = returns.shape[0]
    points = []
    for kind in kinds:
        for zeta in zeta_grid:
            for delta in delta_grid:
                realized = []
                warm: Optional[Decision] = None
                for t in range(window_months, months):
                    window = returns[t - window_months : t]
                    z, yy = _reduce_window(window)
                    if delta == 0.0:
                        w = _solve_window_plain(z, yy, float(zeta), r_beta)
                        warm = None
                    else:
                        if kind == "constant":
                            cost = identity_cost()
                        else:
                            cost = scaled_identity_cost(vols[t - window_months : t])
                        w, warm = _solve_window_dro(
                            z, yy, float(zeta), float(delta), r_beta, cost,
                            iterations, seed, theta0=warm,
                        )
                    weights = np.concatenate([w, [1.0 - float(np.sum(w))]])
                    realized.append(float(weights @ returns[t]))
                realized = np.asarray(realized)
                points.append(
                    FrontierPoint(
                        zeta=float(zeta),
                        delta=float(delta),
                        mean_return=float(np.mean(realized) * 12.0),
                        std_return=float(np.std(realized, ddof=1) * math.sqrt(12.0)),
                        cost_kind=kind,
                    )
                )
    return points
