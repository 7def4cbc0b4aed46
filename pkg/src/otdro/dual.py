"""Per-sample inner maximization of the dual integrand and its derivatives.

For a decision (beta, lambda) and sample x the central object is

    F(gamma) = loss(beta'x + gamma * sqrt(delta) * a; y)
               - lambda * sqrt(delta) * (gamma^2 * a - 1),        a = beta'A(x)^{-1}beta,

whose supremum over gamma is the per-sample robust loss.  Above the concavity
threshold the supremum is found by bisection on the stationarity condition
2*lambda*gamma = loss'(beta'x_tilde); below it a compact-interval grid search
with polishing takes over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import (
    Decision,
    DroProblem,
    InfeasibleDomainError,
    NondifferentiablePointError,
    NumericalError,
)

__all__ = [
    "InnerSolution",
    "SubgradientSample",
    "inner_objective",
    "classify_domain",
    "domain_thresholds",
    "inner_maximize",
    "fallback_maximize",
    "maximizer_extremes",
    "grad_robust_loss",
    "subgrad_robust_loss",
    "dual_objective",
    "robust_loss_batch",
    "squared_loss_closed_form",
]

ORACLE_CUTS = 60
_MAX_BRACKET_DOUBLINGS = 64


@dataclass(frozen=True)
class InnerSolution:
    """Solution of the per-sample inner maximization."""

    g: float
    lrob: float
    x_tilde: np.ndarray
    residual: float
    cuts_used: int
    method: str = "bisection"
    certified: bool = True


@dataclass(frozen=True)
class SubgradientSample:
    """One stochastic (sub)gradient of the robust loss at (beta, lambda)."""

    d_beta: np.ndarray
    d_lambda: float
    lprime_choice: float


def _sample(problem: DroProblem, theta: Decision, i: int):
    x = problem.data.points[i]
    y = problem.data.label_or_nan(i)
    u0 = float(theta.beta @ x)
    a = problem.cost.quad(theta.beta, i)
    return x, y, u0, a


def inner_objective(problem: DroProblem, gamma: float, theta: Decision, x_index: int) -> float:
    """Value of the dual integrand F at transport scale gamma."""
    _, y, u0, a = _sample(problem, theta, x_index)
    sd = problem.sqrt_delta
    u = u0 + gamma * sd * a
    return float(problem.loss.value(u, y)) - theta.lam * sd * (gamma * gamma * a - 1.0)


def domain_thresholds(problem: DroProblem, beta: np.ndarray) -> tuple[float, float]:
    """(lambda_thr, lambda_thr') for a decision vector: the multipliers below
    which the robust loss is infinite, respectively possibly nonconcave."""
    beta = np.asarray(beta, dtype=float)
    amax = float(np.max(problem.cost.quad_all(beta, problem.data.n)))
    thr = problem.loss.kappa * problem.sqrt_delta * amax
    m = problem.loss.second_derivative_bound
    thr_prime = 0.5 * m * problem.sqrt_delta * amax if m is not None else math.inf
    return thr, thr_prime


def classify_domain(problem: DroProblem, theta: Decision) -> str:
    """'interior' / 'boundary' / 'infeasible' relative to the effective domain."""
    thr, _ = domain_thresholds(problem, theta.beta)
    if theta.lam > thr:
        return "interior"
    if theta.lam < thr:
        return "infeasible"
    return "boundary"


def _zero_beta_solution(problem: DroProblem, theta: Decision, i: int) -> InnerSolution:
    x, y, _, _ = _sample(problem, theta, i)
    val = float(problem.loss.value(0.0, y)) + theta.lam * problem.sqrt_delta
    return InnerSolution(
        g=0.0, lrob=val, x_tilde=x.copy(), residual=0.0, cuts_used=0, method="zero-beta"
    )


def _stationarity_gap(problem, theta, y, u0, a, gamma):
    """2*lambda*gamma - loss'(u(gamma)); increasing in gamma on concave stretches."""
    u = u0 + gamma * problem.sqrt_delta * a
    return 2.0 * theta.lam * gamma - float(problem.loss.deriv(u, y))


def _concave_half_width(problem, theta, a: float, lp0: float, consts) -> float:
    """Half-width of the search interval that contains the maximizer when the
    integrand is concave.  Uses the curvature floor phi_min when available,
    otherwise the per-sample bound 2*lambda - sqrt(delta)*a*M."""
    bnorm = float(np.linalg.norm(theta.beta))
    denom = 0.0
    if consts is not None and getattr(consts, "phi_min", 0.0) > 0.0:
        denom = consts.phi_min * bnorm
    m = problem.loss.second_derivative_bound
    if m is not None:
        denom = max(denom, 2.0 * theta.lam - problem.sqrt_delta * a * m)
    if denom <= 0.0:
        return math.inf
    return abs(lp0) / denom


def _compact_half_width(problem, theta, y: float, u0: float, a: float) -> float:
    """Interval bound valid anywhere above the effective-domain threshold,
    derived from the quadratic-growth envelope of the loss."""
    sd = problem.sqrt_delta
    eps = theta.lam / (sd * a) - problem.loss.kappa
    if eps <= 0.0:
        raise InfeasibleDomainError(
            "no finite search interval: multiplier at or below the domain threshold"
        )
    eps = min(eps, 1e6)
    c_eps = problem.loss.growth_offset(y, eps)
    l0 = abs(float(problem.loss.value(0.0, y)))
    lp0 = max(abs(float(problem.loss.dminus(0.0, y))), abs(float(problem.loss.dplus(0.0, y))))
    inner = max(0.0, (2.0 / eps) * (c_eps + l0 + lp0 * abs(u0)))
    bound = math.sqrt(inner) + 4.0 * (problem.loss.kappa + eps) / eps * abs(u0)
    return bound / (sd * a)


def inner_maximize(
    problem: DroProblem,
    theta: Decision,
    x_index: int,
    cuts: int = ORACLE_CUTS,
    consts=None,
    allow_fallback: bool = True,
) -> InnerSolution:
    """Maximize the dual integrand over the transport scale for one sample.

    In the concave regime (multiplier above the per-sample curvature
    threshold) the maximizer is bracketed and located by ``cuts`` bisection
    halvings of the stationarity gap, so the error is interval * 2**-cuts.
    Otherwise the solve is routed to :func:`fallback_maximize`; pass
    ``allow_fallback=False`` to get a NumericalError instead.
    """
    if not np.any(theta.beta):
        return _zero_beta_solution(problem, theta, x_index)
    x, y, u0, a = _sample(problem, theta, x_index)
    sd = problem.sqrt_delta
    m = problem.loss.second_derivative_bound
    concave = m is not None and 2.0 * theta.lam > sd * a * m
    if not concave:
        if not allow_fallback:
            raise NumericalError(
                "nonconcave-regime: multiplier below the per-sample curvature threshold"
            )
        return fallback_maximize(problem, theta, x_index)

    lp0 = float(problem.loss.deriv(u0, y))
    half = _concave_half_width(problem, theta, a, lp0, consts)
    if not math.isfinite(half):
        half = _compact_half_width(problem, theta, y, u0, a)
    if half == 0.0:
        # stationary at the sample itself
        val = float(problem.loss.value(u0, y)) + theta.lam * sd
        return InnerSolution(g=0.0, lrob=val, x_tilde=x.copy(), residual=0.0, cuts_used=0)

    lo, hi = -half, half
    for _ in range(_MAX_BRACKET_DOUBLINGS):
        if _stationarity_gap(problem, theta, y, u0, a, lo) <= 0.0 <= _stationarity_gap(
            problem, theta, y, u0, a, hi
        ):
            break
        lo *= 2.0
        hi *= 2.0
    else:
        raise NumericalError("failed to bracket the inner maximizer")

    for _ in range(cuts):
        mid = 0.5 * (lo + hi)
        if _stationarity_gap(problem, theta, y, u0, a, mid) < 0.0:
            lo = mid
        else:
            hi = mid
    g = 0.5 * (lo + hi)

    base = float(problem.loss.value(u0, y)) + theta.lam * sd
    val = inner_objective(problem, g, theta, x_index)
    if base > val:  # never report worse than the no-transport point
        g, val = 0.0, base
    u = u0 + g * sd * a
    residual = abs(2.0 * theta.lam * g - float(problem.loss.deriv(u, y)))
    x_tilde = x + sd * g * problem.cost.inv_apply(theta.beta, x_index)
    return InnerSolution(g=g, lrob=val, x_tilde=x_tilde, residual=residual, cuts_used=cuts)


def _affine_candidates(problem, theta, y, a):
    """Stationary points of each affine loss piece: gamma_p = slope_p(y)/(2 lambda)."""
    slopes = [float(p.affine_slope(y)) for p in problem.loss.components]
    return [s / (2.0 * theta.lam) for s in slopes]


def _piecewise_affine_maximize(problem, theta, x_index) -> InnerSolution:
    x, y, u0, a = _sample(problem, theta, x_index)
    sd = problem.sqrt_delta
    best_g, best_val = 0.0, -math.inf
    for g in _affine_candidates(problem, theta, y, a):
        val = inner_objective(problem, g, theta, x_index)
        if val > best_val:
            best_g, best_val = g, val
    u = u0 + best_g * sd * a
    lo_d, hi_d = problem.loss.subgradient_interval(u, y)
    target = 2.0 * theta.lam * best_g
    residual = max(0.0, float(lo_d) - target, target - float(hi_d))
    x_tilde = x + sd * best_g * problem.cost.inv_apply(theta.beta, x_index)
    return InnerSolution(
        g=best_g,
        lrob=best_val,
        x_tilde=x_tilde,
        residual=residual,
        cuts_used=0,
        method="piecewise-exact",
        certified=True,
    )


def fallback_maximize(
    problem: DroProblem,
    theta: Decision,
    x_index: int,
    grid_points: int = 4096,
    newton_restarts: int = 8,
) -> InnerSolution:
    """Inner maximization without a concavity certificate.

    Losses built from affine pieces are solved exactly by enumerating the
    per-piece stationary points.  Otherwise the compact growth-bound interval
    is scanned with ``grid_points`` samples and the best ``newton_restarts``
    local maxima are polished (one Newton step where curvature is available,
    then sign bisection of the derivative); the result carries
    ``certified=False``.
    """
    if not np.any(theta.beta):
        return _zero_beta_solution(problem, theta, x_index)
    if problem.loss.piecewise_affine:
        return _piecewise_affine_maximize(problem, theta, x_index)

    x, y, u0, a = _sample(problem, theta, x_index)
    sd = problem.sqrt_delta
    half = _compact_half_width(problem, theta, y, u0, a)
    gs = np.linspace(-half, half, max(int(grid_points), 3))
    u = u0 + gs * sd * a
    vals = np.asarray(problem.loss.value(u, np.full_like(u, y))) - theta.lam * sd * (
        gs * gs * a - 1.0
    )

    interior = np.zeros(len(gs), dtype=bool)
    interior[1:-1] = (vals[1:-1] >= vals[:-2]) & (vals[1:-1] >= vals[2:])
    cand_idx = list(np.nonzero(interior)[0])
    cand_idx += [0, len(gs) - 1]
    cand_idx = sorted(set(cand_idx), key=lambda k: -vals[k])[: max(int(newton_restarts), 1)]

    step = gs[1] - gs[0]
    best_g, best_val = 0.0, float(problem.loss.value(u0, y)) + theta.lam * sd
    for k in cand_idx:
        g = _polish(problem, theta, y, u0, a, float(gs[k]), step)
        val = inner_objective(problem, g, theta, x_index)
        if val > best_val:
            best_g, best_val = g, val
    g = best_g
    ut = u0 + g * sd * a
    lo_d, hi_d = problem.loss.subgradient_interval(ut, y)
    target = 2.0 * theta.lam * g
    residual = max(0.0, float(lo_d) - target, target - float(hi_d))
    x_tilde = x + sd * g * problem.cost.inv_apply(theta.beta, x_index)
    return InnerSolution(
        g=g,
        lrob=best_val,
        x_tilde=x_tilde,
        residual=residual,
        cuts_used=0,
        method="grid-polish",
        certified=False,
    )


def _polish(problem, theta, y, u0, a, g0: float, step: float) -> float:
    """Refine a grid candidate inside [g0 - step, g0 + step]."""
    sd = problem.sqrt_delta
    lo, hi = g0 - step, g0 + step

    def fprime(g):
        u = u0 + g * sd * a
        return sd * a * float(problem.loss.deriv(u, y)) - 2.0 * theta.lam * sd * a * g

    g = g0
    if problem.loss.d2 is not None:
        u = u0 + g * sd * a
        curv = sd * sd * a * a * float(problem.loss.d2(u, y)) - 2.0 * theta.lam * sd * a
        if curv < 0:
            g = min(max(g - fprime(g) / curv, lo), hi)
    flo, fhi = fprime(lo), fprime(hi)
    if flo < 0.0 and fhi < 0.0:
        return lo if inner_objective_scalar(problem, theta, y, u0, a, lo) >= inner_objective_scalar(
            problem, theta, y, u0, a, hi
        ) else hi
    if flo > 0.0 and fhi > 0.0:
        return hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if fprime(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def inner_objective_scalar(problem, theta, y, u0, a, gamma) -> float:
    sd = problem.sqrt_delta
    u = u0 + gamma * sd * a
    return float(problem.loss.value(u, y)) - theta.lam * sd * (gamma * gamma * a - 1.0)


def maximizer_extremes(
    problem: DroProblem,
    theta: Decision,
    x_index: int,
    grid_points: int = 100_000,
    value_tol: float = 1e-9,
) -> tuple[float, float, float]:
    """Extreme elements (g_lo, g_hi) of the maximizer set, plus the optimal value.

    The maximizer set can fail to be a singleton between the domain and
    curvature thresholds; the extremes are taken over all polished candidates
    whose value is within ``value_tol`` (scaled) of the best.
    """
    if not np.any(theta.beta):
        sol = _zero_beta_solution(problem, theta, x_index)
        return 0.0, 0.0, sol.lrob
    _, y, u0, a = _sample(problem, theta, x_index)
    sd = problem.sqrt_delta

    if problem.loss.piecewise_affine:
        cands = _affine_candidates(problem, theta, y, a)
        vals = [inner_objective(problem, g, theta, x_index) for g in cands]
        best = max(vals)
        keep = [g for g, v in zip(cands, vals) if v >= best - value_tol * (1.0 + abs(best))]
        return min(keep), max(keep), best

    half = _compact_half_width(problem, theta, y, u0, a)
    gs = np.linspace(-half, half, max(int(grid_points), 3))
    u = u0 + gs * sd * a
    vals = np.asarray(problem.loss.value(u, np.full_like(u, y))) - theta.lam * sd * (
        gs * gs * a - 1.0
    )
    interior = np.zeros(len(gs), dtype=bool)
    interior[1:-1] = (vals[1:-1] >= vals[:-2]) & (vals[1:-1] >= vals[2:])
    idx = list(np.nonzero(interior)[0]) + [0, len(gs) - 1]
    step = gs[1] - gs[0]
    polished = []
    for k in sorted(set(idx), key=lambda k: -vals[k])[:32]:
        g = _polish(problem, theta, y, u0, a, float(gs[k]), step)
        polished.append((g, inner_objective_scalar(problem, theta, y, u0, a, g)))
    best = max(v for _, v in polished)
    keep = [g for g, v in polished if v >= best - value_tol * (1.0 + abs(best))]
    return min(keep), max(keep), best


def grad_robust_loss(
    problem: DroProblem, theta: Decision, x_index: int, inner: InnerSolution
) -> SubgradientSample:
    """Gradient of the robust loss at a differentiable point.

    Raises NondifferentiablePointError at a kink of the loss; the stochastic
    subgradient path must be used there.
    """
    _, y, _, a = _sample(problem, theta, x_index)
    ut = float(theta.beta @ inner.x_tilde)
    lo_d, hi_d = problem.loss.subgradient_interval(ut, y)
    lo_d, hi_d = float(lo_d), float(hi_d)
    if abs(hi_d - lo_d) > 1e-12 * (1.0 + abs(hi_d)):
        raise NondifferentiablePointError(
            "loss kink at the transported point; draw a subgradient instead"
        )
    lp = hi_d
    d_lambda = problem.sqrt_delta * (1.0 - inner.g * inner.g * a)
    return SubgradientSample(d_beta=lp * inner.x_tilde, d_lambda=d_lambda, lprime_choice=lp)


def subgrad_robust_loss(
    problem: DroProblem,
    theta: Decision,
    x_index: int,
    inner: InnerSolution,
    rng: np.random.Generator,
) -> SubgradientSample:
    """Stochastic subgradient: the loss derivative is drawn uniformly from the
    one-sided derivative interval at the transported point."""
    _, y, _, a = _sample(problem, theta, x_index)
    ut = float(theta.beta @ inner.x_tilde)
    lo_d, hi_d = problem.loss.subgradient_interval(ut, y)
    lo_d, hi_d = float(lo_d), float(hi_d)
    lp = float(rng.uniform(lo_d, hi_d)) if hi_d > lo_d else lo_d
    d_lambda = problem.sqrt_delta * (1.0 - inner.g * inner.g * a)
    return SubgradientSample(d_beta=lp * inner.x_tilde, d_lambda=d_lambda, lprime_choice=lp)


# --- batched evaluation ----------------------------------------------------


@dataclass(frozen=True)
class BatchInner:
    g: np.ndarray
    lrob: np.ndarray
    residual: np.ndarray
    quad: np.ndarray
    certified: bool


def robust_loss_batch(
    problem: DroProblem, theta: Decision, cuts: int = ORACLE_CUTS, consts=None
) -> BatchInner:
    """Vectorized inner maximization across every sample.

    Smooth losses above the per-sample curvature threshold run one bisection
    over all samples simultaneously; piecewise-affine losses enumerate their
    stationary candidates; anything else falls back to per-sample solves.
    """
    n = problem.data.n
    sd = problem.sqrt_delta
    if not np.any(theta.beta):
        y = problem.data.labels_or_nan()
        base = np.asarray(problem.loss.value(np.zeros(n), y), dtype=float) + theta.lam * sd
        return BatchInner(
            g=np.zeros(n), lrob=base, residual=np.zeros(n), quad=np.zeros(n), certified=True
        )

    a = problem.cost.quad_all(theta.beta, n)
    u0 = problem.index_values(theta.beta)
    y = problem.data.labels_or_nan()
    m = problem.loss.second_derivative_bound

    if m is not None and np.all(2.0 * theta.lam > sd * a * m):
        return _batch_bisection(problem, theta, u0, y, a, cuts, consts)
    if problem.loss.piecewise_affine:
        return _batch_affine(problem, theta, u0, y, a)

    g = np.empty(n)
    lrob = np.empty(n)
    res = np.empty(n)
    certified = True
    for i in range(n):
        sol = inner_maximize(problem, theta, i, cuts=cuts, consts=consts)
        g[i], lrob[i], res[i] = sol.g, sol.lrob, sol.residual
        certified = certified and sol.certified
    return BatchInner(g=g, lrob=lrob, residual=res, quad=a, certified=certified)


def _batch_bisection(problem, theta, u0, y, a, cuts, consts) -> BatchInner:
    sd = problem.sqrt_delta
    loss = problem.loss
    lam = theta.lam
    m = loss.second_derivative_bound
    bnorm = float(np.linalg.norm(theta.beta))

    lp0 = np.asarray(loss.deriv(u0, y), dtype=float)
    denom = 2.0 * lam - sd * a * m
    if consts is not None and getattr(consts, "phi_min", 0.0) > 0.0:
        denom = np.maximum(denom, consts.phi_min * bnorm)
    half = np.abs(lp0) / denom

    def gap(gs):
        return 2.0 * lam * gs - np.asarray(loss.deriv(u0 + gs * sd * a, y), dtype=float)

    lo, hi = -half, half
    for _ in range(_MAX_BRACKET_DOUBLINGS):
        bad = (gap(lo) > 0.0) | (gap(hi) < 0.0)
        bad &= half > 0.0
        if not np.any(bad):
            break
        lo = np.where(bad, 2.0 * lo, lo)
        hi = np.where(bad, 2.0 * hi, hi)
    else:
        raise NumericalError("failed to bracket the inner maximizer (batch)")

    for _ in range(cuts):
        mid = 0.5 * (lo + hi)
        neg = gap(mid) < 0.0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    g = 0.5 * (lo + hi)

    val = np.asarray(loss.value(u0 + g * sd * a, y), dtype=float) - lam * sd * (g * g * a - 1.0)
    base = np.asarray(loss.value(u0, y), dtype=float) + lam * sd
    worse = base > val
    g = np.where(worse, 0.0, g)
    val = np.where(worse, base, val)
    residual = np.abs(2.0 * lam * g - np.asarray(loss.deriv(u0 + g * sd * a, y), dtype=float))
    return BatchInner(g=g, lrob=val, residual=residual, quad=a, certified=True)


def _batch_affine(problem, theta, u0, y, a) -> BatchInner:
    sd = problem.sqrt_delta
    lam = theta.lam
    slopes = np.stack(
        [np.asarray(p.affine_slope(y), dtype=float) * np.ones_like(u0) for p in problem.loss.components]
    )
    cand = slopes / (2.0 * lam)  # (K, n)
    u = u0[None, :] + cand * sd * a[None, :]
    vals = np.asarray(problem.loss.value(u, np.broadcast_to(y, u.shape)), dtype=float)
    vals = vals - lam * sd * (cand * cand * a[None, :] - 1.0)
    pick = np.argmax(vals, axis=0)
    idx = np.arange(u0.shape[0])
    g = cand[pick, idx]
    val = vals[pick, idx]
    ut = u0 + g * sd * a
    lo_d = np.asarray(problem.loss.dminus(ut, y), dtype=float)
    hi_d = np.asarray(problem.loss.dplus(ut, y), dtype=float)
    target = 2.0 * lam * g
    residual = np.maximum(0.0, np.maximum(lo_d - target, target - hi_d))
    return BatchInner(g=g, lrob=val, residual=residual, quad=a, certified=True)


def dual_objective(
    problem: DroProblem, theta: Decision, cuts: int = ORACLE_CUTS, consts=None
) -> float:
    """Empirical mean of the robust loss; +inf outside the effective domain."""
    if not np.any(theta.beta):
        y = problem.data.labels_or_nan()
        vals = np.asarray(problem.loss.value(np.zeros(problem.data.n), y), dtype=float)
        return float(np.mean(vals)) + theta.lam * problem.sqrt_delta
    if classify_domain(problem, theta) != "interior":
        return math.inf
    batch = robust_loss_batch(problem, theta, cuts=cuts, consts=consts)
    return float(np.mean(batch.lrob))


def squared_loss_closed_form(problem: DroProblem, theta: Decision, x_index: int) -> float:
    """Robust loss of the squared loss in closed form.

    For loss (u - y)^2 the stationarity condition is linear in gamma, giving
    lrob = lambda*sqrt(delta) + lambda*(beta'x - y)^2 / (lambda - sqrt(delta)*a)
    whenever lambda > sqrt(delta)*a.  Used as an oracle for the bisection path.
    """
    if problem.loss.name != "squared":
        raise NumericalError("closed form only applies to the squared loss")
    _, y, u0, a = _sample(problem, theta, x_index)
    sd = problem.sqrt_delta
    gap = theta.lam - sd * a
    if gap <= 0.0:
        raise InfeasibleDomainError("closed form needs lambda > sqrt(delta) * a")
    r = u0 - y
    return theta.lam * sd + theta.lam * r * r / gap
