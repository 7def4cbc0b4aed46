"""Adversarial (worst-case) distributions and their dependence on the budget.

For a fixed decision vector the worst-case model relocates each sample along
A(x)^{-1} beta by sqrt(delta) times a per-sample transport scale G, with the
expected transport cost saturating the budget whenever the dual multiplier
sits strictly above the domain threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace
from typing import Optional

import numpy as np

from .dual import domain_thresholds, maximizer_extremes, robust_loss_batch
from .model import Decision, DroProblem
from .optimizer import solve_lambda_star
from .regions import build_constants

__all__ = ["WorstCaseTransport", "ComparativeStatics", "worst_case", "comparative_statics"]


@dataclass(frozen=True)
class WorstCaseTransport:
    """Worst-case relocation of the sample set for one budget delta."""

    regime: str  # "unique" | "randomized" | "nonexistent" | "constant-loss"
    delta: float
    lambda_star: float
    G: Optional[np.ndarray]
    X_star: Optional[np.ndarray]
    budget: Optional[float]
    certified: bool
    residual: float
    G_minus: Optional[np.ndarray] = None
    G_plus: Optional[np.ndarray] = None
    bernoulli_p: Optional[float] = None
    grid_points: Optional[int] = None


def _transport_points(problem: DroProblem, beta: np.ndarray, g: np.ndarray) -> np.ndarray:
    sd = problem.sqrt_delta
    pts = problem.data.points
    return np.stack(
        [pts[i] + sd * g[i] * problem.cost.inv_apply(beta, i) for i in range(problem.data.n)]
    )


def _budget(problem: DroProblem, x_star: np.ndarray) -> float:
    costs = [
        problem.cost.cost(i, problem.data.points[i], x_star[i]) for i in range(problem.data.n)
    ]
    return float(np.mean(costs))


def worst_case(problem: DroProblem, beta: np.ndarray, tol: float = 1e-10) -> WorstCaseTransport:
    """Construct the worst-case distribution for a fixed decision vector.

    Above the curvature threshold the per-sample maximizer is unique and the
    transport budget is saturated.  Between the domain and curvature
    thresholds the maximizer set may have several elements; the extreme
    selections are mixed with a Bernoulli weight chosen so the budget identity
    E[G^2 a] = 1 holds exactly.  At the domain threshold no worst-case
    distribution need exist and none is fabricated.
    """
    beta = np.asarray(beta, dtype=float)
    if not np.any(beta):
        return WorstCaseTransport(
            regime="constant-loss",
            delta=problem.delta,
            lambda_star=0.0,
            G=np.zeros(problem.data.n),
            X_star=problem.data.points.copy(),
            budget=0.0,
            certified=True,
            residual=0.0,
        )
    ls = solve_lambda_star(problem, beta, tol=tol)
    thr, thr_prime = domain_thresholds(problem, beta)
    if ls.flag == "lower-boundary" or (thr > 0 and ls.value <= thr * (1 + 1e-12)):
        return WorstCaseTransport(
            regime="nonexistent",
            delta=problem.delta,
            lambda_star=thr,
            G=None,
            X_star=None,
            budget=None,
            certified=True,
            residual=ls.residual,
        )
    theta = Decision(beta=beta, lam=ls.value)

    if ls.value > thr_prime:
        batch = robust_loss_batch(problem, theta, cuts=80)
        x_star = _transport_points(problem, beta, batch.g)
        return WorstCaseTransport(
            regime="unique",
            delta=problem.delta,
            lambda_star=ls.value,
            G=batch.g,
            X_star=x_star,
            budget=_budget(problem, x_star),
            certified=batch.certified,
            residual=abs(ls.residual),
        )

    # randomized selection between the extreme maximizers
    grid_points = 100_000
    n = problem.data.n
    g_lo = np.empty(n)
    g_hi = np.empty(n)
    for i in range(n):
        g_lo[i], g_hi[i], _ = maximizer_extremes(problem, theta, i, grid_points=grid_points)
    a = problem.cost.quad_all(beta, n)
    c_lo = float(np.mean(g_lo**2 * a))
    c_hi = float(np.mean(g_hi**2 * a))
    # mixing weight on the inf-selection; c_hi need not exceed c_lo since the
    # sup of the maximizer set can have the smaller square
    if abs(c_hi - c_lo) > 1e-14:
        p = (c_hi - 1.0) / (c_hi - c_lo)
        p = min(max(p, 0.0), 1.0)
    else:
        p = 0.0
    g = g_hi
    x_star = _transport_points(problem, beta, g)
    mix_budget = problem.delta * (p * c_lo + (1.0 - p) * c_hi)
    return WorstCaseTransport(
        regime="randomized",
        delta=problem.delta,
        lambda_star=ls.value,
        G=g,
        X_star=x_star,
        budget=mix_budget,
        certified=problem.loss.piecewise_affine,
        residual=abs(ls.residual),
        G_minus=g_lo,
        G_plus=g_hi,
        bernoulli_p=p,
        grid_points=None if problem.loss.piecewise_affine else grid_points,
    )


@dataclass(frozen=True)
class ComparativeStatics:
    """Worst-case transports along a budget grid, with the per-sample checks."""

    deltas: np.ndarray
    transports: list
    displacement: np.ndarray  # (len(deltas), n)
    flagged: list  # deltas where delta >= estimated delta1
    monotonicity_violations: int
    min_direction_cosine: float


def comparative_statics(
    problem: DroProblem,
    beta: np.ndarray,
    delta_grid,
    consts=None,
    tol: float = 1e-10,
) -> ComparativeStatics:
    """Trace the worst-case transport as the budget grows.

    Per sample, the displacement must be nondecreasing in delta and the
    displacement direction must stay collinear with A(x)^{-1} beta (oriented
    by the sign of the transport scale); budgets at or above the estimated
    strong-convexity threshold are flagged since the guarantees lapse there.
    """
    beta = np.asarray(beta, dtype=float)
    deltas = np.sort(np.asarray(delta_grid, dtype=float))
    if consts is None:
        consts = build_constants(problem)
    flagged = [float(d) for d in deltas if d >= consts.delta1]

    transports = []
    disp = np.zeros((len(deltas), problem.data.n))
    min_cos = 1.0
    for r, d in enumerate(deltas):
        prob_d = dc_replace(problem, delta=float(d))
        wc = worst_case(prob_d, beta, tol=tol)
        transports.append(wc)
        if wc.X_star is None:
            disp[r] = math.nan
            continue
        disp[r] = np.linalg.norm(wc.X_star - problem.data.points, axis=1)
        for i in range(problem.data.n):
            if wc.G[i] == 0.0 or disp[r, i] == 0.0:
                continue
            direction = prob_d.cost.inv_apply(beta, i) * math.copysign(1.0, wc.G[i])
            dn = float(np.linalg.norm(direction))
            move = wc.X_star[i] - problem.data.points[i]
            cos = float(move @ direction) / (dn * float(np.linalg.norm(move)))
            min_cos = min(min_cos, cos)

    violations = 0
    for i in range(problem.data.n):
        col = disp[:, i]
        ok = ~np.isnan(col)
        c = col[ok]
        if len(c) > 1:
            violations += int(np.sum(c[1:] < c[:-1] - 1e-12))
    return ComparativeStatics(
        deltas=deltas,
        transports=transports,
        displacement=disp,
        flagged=flagged,
        monotonicity_violations=violations,
        min_direction_cosine=min_cos,
    )
