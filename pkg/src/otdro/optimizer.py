"""Projected stochastic-gradient schemes for the dual objective.

Every variant follows the same skeleton: draw a sample, solve the univariate
inner maximization with an iteration-dependent cut budget, take a noisy
(sub)gradient step, project onto the scheme's feasible region, and maintain a
polynomial-decay running average of the iterates.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dual import (
    classify_domain,
    domain_thresholds,
    dual_objective,
    grad_robust_loss,
    inner_maximize,
    robust_loss_batch,
    subgrad_robust_loss,
)
from .model import ConfigError, Decision, DroProblem, NumericalError
from .regions import ConstantsBundle, project_U_eta, project_W

__all__ = [
    "StepSchedule",
    "Checkpoint",
    "RunTrace",
    "cut_budget",
    "sgd_smooth",
    "sgd_nonsmooth",
    "sgd_two_timescale",
    "line_search_outer",
    "LambdaStarResult",
    "solve_lambda_star",
    "RateDiagnostic",
    "rate_diagnostic",
]


@dataclass(frozen=True)
class StepSchedule:
    """Polynomially decaying step sizes alpha_k = alpha * k**-tau."""

    alpha: float
    tau: float

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("step scale alpha must be positive")
        if not (0.5 <= self.tau <= 1.0):
            raise ConfigError("decay exponent tau must lie in [1/2, 1]")

    def step(self, k: int) -> float:
        return self.alpha * k ** (-self.tau)


@dataclass(frozen=True)
class Checkpoint:
    k: int
    theta: np.ndarray
    theta_bar: np.ndarray
    f_delta: Optional[float]
    f_delta_bar: Optional[float]
    cuts: int
    elapsed_s: float


@dataclass
class RunTrace:
    """Thinned record of an optimization run, reproducible from its seed."""

    seed: int
    checkpoints: list = field(default_factory=list)
    final: Optional[Decision] = None
    final_bar: Optional[Decision] = None
    iterations: int = 0
    meta: dict = field(default_factory=dict)

    def ks(self) -> np.ndarray:
        return np.array([c.k for c in self.checkpoints])

    def f_bars(self) -> np.ndarray:
        return np.array(
            [c.f_delta_bar if c.f_delta_bar is not None else math.nan for c in self.checkpoints]
        )


def cut_budget(schedule: StepSchedule, k: int, x_norm: float, floor: int = 10) -> int:
    """Bisection cuts for iteration k: grows like tau*log2(k) plus a data term."""
    raw = schedule.tau * math.log2(max(k, 1)) - math.log2(schedule.alpha) + 2.0 * math.log2(
        1.0 + x_norm
    )
    return max(floor, int(math.ceil(raw)))


def _polyavg(bar: np.ndarray, theta: np.ndarray, k: int, xi: float) -> np.ndarray:
    w = (xi + 1.0) / (k + xi)
    return (1.0 - w) * bar + w * theta


def _default_start_W(problem: DroProblem, consts: ConstantsBundle) -> Decision:
    return Decision(beta=np.zeros(problem.data.d), lam=0.5 * consts.K2 * problem.r_beta)


def _in_W(theta: Decision, consts: ConstantsBundle, r_beta: float, tol: float = 1e-9) -> bool:
    b = float(np.linalg.norm(theta.beta))
    return (
        b <= r_beta + tol
        and consts.K1 * b <= theta.lam + tol
        and theta.lam <= consts.K2 * r_beta + tol
    )


def _project_W_with_floor(
    theta: Decision, consts: ConstantsBundle, problem: DroProblem, floor_eta: float
) -> Decision:
    """Alternate the two exact projections until the point sits in W and keeps
    the multiplier above the domain threshold.  A no-op whenever delta < delta0,
    where W already sits strictly inside the effective domain."""
    cur = project_W(theta, consts, problem.r_beta)
    for _ in range(20):
        thr, _ = domain_thresholds(problem, cur.beta)
        if cur.lam >= thr + 0.5 * floor_eta:
            return cur
        cur = project_W(project_U_eta(cur, problem, floor_eta), consts, problem.r_beta)
    return cur


def sgd_smooth(
    problem: DroProblem,
    consts: ConstantsBundle,
    schedule: StepSchedule,
    xi: float = 0.0,
    iterations: int = 10_000,
    seed: int = 0,
    theta0: Optional[Decision] = None,
    eval_every: Optional[int] = None,
    eval_cuts: int = 60,
    floor_eta: float = 0.0,
    batch_size: int = 1,
) -> RunTrace:
    """Projected SGD on W with polynomial-decay averaging (smooth losses).

    ``floor_eta`` > 0 additionally keeps the multiplier above the effective
    domain threshold, which only matters in the delta >= delta0 regime where
    W alone does not guarantee it.  ``batch_size`` averages that many
    per-sample gradients per update (default one sample per iteration).
    """
    if not problem.loss.smooth:
        raise ConfigError("sgd_smooth needs a twice-differentiable loss")
    if xi < 0:
        raise ConfigError("averaging constant xi must be nonnegative")
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    if problem.delta >= consts.delta0:
        warnings.warn(
            "delta at or above delta0: dual objective may be nonsmooth",
            RuntimeWarning,
            stacklevel=2,
        )

    def proj(t: Decision) -> Decision:
        if floor_eta > 0.0:
            return _project_W_with_floor(t, consts, problem, floor_eta)
        return project_W(t, consts, problem.r_beta)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    theta = theta0 if theta0 is not None else _default_start_W(problem, consts)
    theta = proj(theta)
    bar = theta.as_vector()
    cur = theta
    every = eval_every or max(1, math.ceil(iterations / 200))
    trace = RunTrace(seed=seed, iterations=iterations, meta={"variant": "smooth", "xi": xi})
    t0 = time.perf_counter()
    cuts = 0
    for k in range(1, iterations + 1):
        g_beta = np.zeros(problem.data.d)
        g_lam = 0.0
        for _ in range(batch_size):
            i = int(rng.integers(problem.data.n))
            cuts = cut_budget(schedule, k, float(np.linalg.norm(problem.data.points[i])))
            inner = inner_maximize(problem, cur, i, cuts=cuts, consts=consts)
            grad = grad_robust_loss(problem, cur, i, inner)
            g_beta += grad.d_beta / batch_size
            g_lam += grad.d_lambda / batch_size
        step = schedule.step(k)
        raw = Decision(beta=cur.beta - step * g_beta, lam=cur.lam - step * g_lam)
        cur = proj(raw)
        if not _in_W(cur, consts, problem.r_beta):
            raise NumericalError("projected iterate escaped the feasible cone")
        bar = _polyavg(bar, cur.as_vector(), k, xi)
        if k % every == 0 or k == iterations:
            theta_bar = Decision.from_vector(bar)
            trace.checkpoints.append(
                Checkpoint(
                    k=k,
                    theta=cur.as_vector(),
                    theta_bar=bar.copy(),
                    f_delta=dual_objective(problem, cur, cuts=eval_cuts, consts=consts),
                    f_delta_bar=dual_objective(problem, theta_bar, cuts=eval_cuts, consts=consts),
                    cuts=cuts,
                    elapsed_s=time.perf_counter() - t0,
                )
            )
    trace.final = cur
    trace.final_bar = Decision.from_vector(bar)
    return trace


def sgd_nonsmooth(
    problem: DroProblem,
    schedule: StepSchedule,
    eta: float,
    xi: float = 1.0,
    iterations: int = 10_000,
    seed: int = 0,
    theta0: Optional[Decision] = None,
    eval_every: Optional[int] = None,
    eval_cuts: int = 60,
) -> RunTrace:
    """Projected stochastic subgradient descent on U_eta for piecewise losses.

    The loss derivative at a kink is drawn uniformly from the one-sided
    derivative interval; the draw stream is separate from the sampling stream
    so seeds compose.
    """
    if schedule.tau != 0.5:
        raise ConfigError("nonsmooth scheme requires tau = 1/2")
    if xi < 1.0:
        raise ConfigError("nonsmooth scheme requires xi >= 1")
    if eta <= 0:
        raise ConfigError("eta must be positive")
    ss = np.random.SeedSequence(seed).spawn(2)
    rng_sample = np.random.default_rng(ss[0])
    rng_draw = np.random.default_rng(ss[1])
    if theta0 is None:
        # the inner maximizer scales like 1/lam near the domain floor, so the
        # start sits at the sqrt(delta) scale rather than on the floor itself
        theta0 = Decision(beta=np.zeros(problem.data.d), lam=max(eta, problem.sqrt_delta))
    cur = project_U_eta(theta0, problem, eta)
    bar = cur.as_vector()
    every = eval_every or max(1, math.ceil(iterations / 200))
    trace = RunTrace(
        seed=seed, iterations=iterations, meta={"variant": "nonsmooth", "eta": eta, "xi": xi}
    )
    t0 = time.perf_counter()
    cuts = 0
    for k in range(1, iterations + 1):
        i = int(rng_sample.integers(problem.data.n))
        cuts = cut_budget(schedule, k, float(np.linalg.norm(problem.data.points[i])))
        inner = inner_maximize(problem, cur, i, cuts=cuts)
        sub = subgrad_robust_loss(problem, cur, i, inner, rng_draw)
        step = schedule.step(k)
        raw = Decision(beta=cur.beta - step * sub.d_beta, lam=cur.lam - step * sub.d_lambda)
        cur = project_U_eta(raw, problem, eta)
        bar = _polyavg(bar, cur.as_vector(), k, xi)
        if k % every == 0 or k == iterations:
            theta_bar = Decision.from_vector(bar)
            trace.checkpoints.append(
                Checkpoint(
                    k=k,
                    theta=cur.as_vector(),
                    theta_bar=bar.copy(),
                    f_delta=dual_objective(problem, cur, cuts=eval_cuts),
                    f_delta_bar=dual_objective(problem, theta_bar, cuts=eval_cuts),
                    cuts=cuts,
                    elapsed_s=time.perf_counter() - t0,
                )
            )
    trace.final = cur
    trace.final_bar = Decision.from_vector(bar)
    return trace


def sgd_two_timescale(
    problem: DroProblem,
    consts: ConstantsBundle,
    beta_schedule: StepSchedule,
    lambda_schedule: StepSchedule,
    iterations: int = 10_000,
    seed: int = 0,
    theta0: Optional[Decision] = None,
    eval_every: Optional[int] = None,
    eval_cuts: int = 60,
) -> RunTrace:
    """SGD with separate step sizes for beta and lambda, jointly projected on W.

    The beta steps must vanish relative to the lambda steps, which requires
    tau_beta > tau_lambda with both exponents inside (1/2, 1).
    """
    for sch, label in ((beta_schedule, "beta"), (lambda_schedule, "lambda")):
        if not (0.5 < sch.tau < 1.0):
            raise ConfigError(f"{label} schedule needs tau in (1/2, 1)")
    if beta_schedule.tau <= lambda_schedule.tau:
        raise ConfigError("beta steps must decay faster: tau_beta > tau_lambda")
    if not problem.loss.smooth:
        raise ConfigError("two-timescale scheme needs a twice-differentiable loss")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    theta = theta0 if theta0 is not None else _default_start_W(problem, consts)
    cur = project_W(theta, consts, problem.r_beta)
    bar = cur.as_vector()
    every = eval_every or max(1, math.ceil(iterations / 200))
    trace = RunTrace(seed=seed, iterations=iterations, meta={"variant": "two-timescale"})
    t0 = time.perf_counter()
    cuts = 0
    for k in range(1, iterations + 1):
        i = int(rng.integers(problem.data.n))
        cuts = cut_budget(beta_schedule, k, float(np.linalg.norm(problem.data.points[i])))
        inner = inner_maximize(problem, cur, i, cuts=cuts, consts=consts)
        grad = grad_robust_loss(problem, cur, i, inner)
        raw = Decision(
            beta=cur.beta - beta_schedule.step(k) * grad.d_beta,
            lam=cur.lam - lambda_schedule.step(k) * grad.d_lambda,
        )
        cur = project_W(raw, consts, problem.r_beta)
        bar = _polyavg(bar, cur.as_vector(), k, 0.0)
        if k % every == 0 or k == iterations:
            theta_bar = Decision.from_vector(bar)
            trace.checkpoints.append(
                Checkpoint(
                    k=k,
                    theta=cur.as_vector(),
                    theta_bar=bar.copy(),
                    f_delta=dual_objective(problem, cur, cuts=eval_cuts, consts=consts),
                    f_delta_bar=dual_objective(problem, theta_bar, cuts=eval_cuts, consts=consts),
                    cuts=cuts,
                    elapsed_s=time.perf_counter() - t0,
                )
            )
    trace.final = cur
    trace.final_bar = Decision.from_vector(bar)
    return trace


def _minimize_beta_at_lambda(
    problem: DroProblem,
    consts: ConstantsBundle,
    lam: float,
    iterations: int,
    seed: int,
    schedule: StepSchedule,
) -> Decision:
    """Averaged projected SGD over beta alone at a fixed multiplier."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    beta = np.zeros(problem.data.d)
    bar = beta.copy()
    r = problem.r_beta
    for k in range(1, iterations + 1):
        i = int(rng.integers(problem.data.n))
        cuts = cut_budget(schedule, k, float(np.linalg.norm(problem.data.points[i])))
        cur = Decision(beta=beta, lam=lam)
        inner = inner_maximize(problem, cur, i, cuts=cuts, consts=consts)
        grad = grad_robust_loss(problem, cur, i, inner)
        beta = beta - schedule.step(k) * grad.d_beta
        nrm = float(np.linalg.norm(beta))
        if nrm > r:
            beta = beta * (r / nrm)
        bar = bar + (beta - bar) / k
    return Decision(beta=bar, lam=lam)


_INV_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def line_search_outer(
    problem: DroProblem,
    consts: ConstantsBundle,
    inner_iterations: int = 2000,
    lambda_tol: float = 1e-2,
    seed: int = 0,
    inner_schedule: Optional[StepSchedule] = None,
) -> tuple[float, np.ndarray, float]:
    """Golden-section search over the multiplier on [0, K2*R].

    h(lam) = inf_beta f(beta, lam) is convex; each probe runs an averaged SGD
    over beta alone with common random numbers so the probes are comparable.
    Returns (lambda_star, beta_star, value).
    """
    schedule = inner_schedule or StepSchedule(alpha=0.5, tau=0.7)
    cap = consts.K2 * problem.r_beta
    evals: dict[float, tuple[float, np.ndarray]] = {}

    def h(lam: float) -> float:
        if lam not in evals:
            dec = _minimize_beta_at_lambda(problem, consts, lam, inner_iterations, seed, schedule)
            val = dual_objective(problem, dec, cuts=60, consts=consts)
            evals[lam] = (val, dec.beta)
        return evals[lam][0]

    lo, hi = 0.0, cap
    c = hi - _INV_GOLDEN * (hi - lo)
    d = lo + _INV_GOLDEN * (hi - lo)
    while hi - lo > lambda_tol:
        if h(c) <= h(d):
            hi = d
        else:
            lo = c
        c = hi - _INV_GOLDEN * (hi - lo)
        d = lo + _INV_GOLDEN * (hi - lo)
    lam_star = 0.5 * (lo + hi)
    val, beta = evals[min(evals, key=lambda l: evals[l][0])]
    # re-evaluate at the midpoint so the reported triple is self-consistent
    dec = _minimize_beta_at_lambda(problem, consts, lam_star, inner_iterations, seed, schedule)
    val_mid = dual_objective(problem, dec, cuts=60, consts=consts)
    if val_mid <= val:
        return lam_star, dec.beta, val_mid
    best_lam = min(evals, key=lambda l: evals[l][0])
    return best_lam, evals[best_lam][1], evals[best_lam][0]


@dataclass(frozen=True)
class LambdaStarResult:
    value: float
    flag: str  # "root" | "lower-boundary" | "upper-boundary" | "zero-beta"
    residual: float


def solve_lambda_star(
    problem: DroProblem,
    beta: np.ndarray,
    tol: float = 1e-10,
    cuts: int = 80,
) -> LambdaStarResult:
    """The multiplier minimizing f(beta, .), via the first-order condition.

    At an interior optimum the transport scales satisfy E[g^2 a] = 1; the map
    lam -> E[g^2 a] is decreasing, so the root is found by bisection between
    the closed-form bracket endpoints.  A flag reports when the condition only
    holds with inequality at a bracket boundary (at the lower end the
    first-order condition pins lambda to the domain threshold, where a
    worst-case distribution need not exist).
    """
    beta = np.asarray(beta, dtype=float)
    if not np.any(beta):
        return LambdaStarResult(value=0.0, flag="zero-beta", residual=0.0)
    thr, _ = domain_thresholds(problem, beta)
    lp2 = _mean_sq_deriv(problem, beta)
    bnorm = float(np.linalg.norm(beta))
    rho_min, rho_max = problem.cost.rho_min, problem.cost.rho_max
    lam_lo = 0.5 * bnorm * math.sqrt(lp2 / rho_max)
    m = problem.loss.second_derivative_bound
    lam_hi = bnorm * math.sqrt(lp2 / rho_min)
    if m is not None:
        lam_hi += 0.5 * problem.sqrt_delta * m * bnorm * bnorm / rho_min
    lam_hi = max(lam_hi, lam_lo * 2.0, thr * 2.0, 1e-8)

    def excess(lam: float) -> float:
        batch = robust_loss_batch(problem, Decision(beta=beta, lam=lam), cuts=cuts)
        return float(np.mean(batch.g**2 * batch.quad)) - 1.0

    lo = max(lam_lo, thr * (1.0 + 1e-12))
    if lo <= 0.0:
        lo = 1e-10 * lam_hi
    shrink = 0
    while excess(lo) < 0.0:
        if thr > 0.0 and lo <= thr * (1.0 + 1e-9):
            return LambdaStarResult(value=thr, flag="lower-boundary", residual=excess(lo))
        lo = max(0.5 * lo, thr * (1.0 + 1e-12)) if thr > 0 else 0.5 * lo
        shrink += 1
        if shrink > 200 or lo < 1e-300:
            return LambdaStarResult(value=lo, flag="lower-boundary", residual=excess(lo))
    hi = max(lam_hi, lo * (1.0 + 1e-12))
    grow = 0
    while excess(hi) > 0.0:
        hi *= 2.0
        grow += 1
        if grow > 200:
            return LambdaStarResult(value=hi, flag="upper-boundary", residual=excess(hi))
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        e = excess(mid)
        if abs(e) <= tol:
            return LambdaStarResult(value=mid, flag="root", residual=e)
        if e > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * max(1.0, hi):
            break
    mid = 0.5 * (lo + hi)
    return LambdaStarResult(value=mid, flag="root", residual=excess(mid))


def _mean_sq_deriv(problem: DroProblem, beta: np.ndarray) -> float:
    u = problem.index_values(beta)
    y = problem.data.labels_or_nan()
    lp = np.asarray(problem.loss.dplus(u, y), dtype=float)
    return float(np.mean(lp * lp))


@dataclass(frozen=True)
class RateDiagnostic:
    slope: float
    intercept: float
    points_used: int
    points_excluded: int


def rate_diagnostic(
    trace: RunTrace, f_star: float, k_window: tuple[float, float] = (1e3, 1e5)
) -> RateDiagnostic:
    """Least-squares slope of log(f(avg iterate) - f_star) against log k."""
    ks, gaps = [], []
    excluded = 0
    for c in trace.checkpoints:
        if not (k_window[0] <= c.k <= k_window[1]) or c.f_delta_bar is None:
            continue
        gap = c.f_delta_bar - f_star
        if gap <= 0 or not math.isfinite(gap):
            excluded += 1
            continue
        ks.append(math.log(c.k))
        gaps.append(math.log(gap))
    if len(ks) < 2:
        return RateDiagnostic(slope=0.0, intercept=0.0, points_used=len(ks), points_excluded=excluded)
    slope, intercept = np.polyfit(np.array(ks), np.array(gaps), 1)
    return RateDiagnostic(
        slope=float(slope),
        intercept=float(intercept),
        points_used=len(ks),
        points_excluded=excluded,
    )
