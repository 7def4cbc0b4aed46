"""Derived constants and feasible regions for the dual decision (beta, lambda).

The optimizer-containing cone V = {K1||b|| <= lam <= K2||b||}, its convex
relaxation W = {K1||b|| <= lam <= K2*R} used for projected updates, and the
shifted effective domain U_eta = {lam >= lambda_thr(b) + eta} for nonsmooth
losses, together with the scalar constants (delta0, delta1, phi_min, kappa0)
that control which regime an ambiguity radius falls into.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dual import domain_thresholds
from .model import ConfigError, Decision, DroProblem

__all__ = [
    "ConstantsBundle",
    "estimate_L_bounds",
    "lambda_thr",
    "lambda_thr_prime",
    "build_constants",
    "project_W",
    "project_U_eta",
]


@dataclass(frozen=True)
class ConstantsBundle:
    """Scalar constants derived from the loss, the cost field and the data.

    L_lower / L_upper bound E[loss'(beta'X)^2] over the decision ball; all the
    other fields are closed-form functions of them and of (delta, M, R_beta,
    rho_min, rho_max).  ``estimated`` records whether the L bounds came from
    sampling rather than being supplied exactly.
    """

    L_lower: float
    L_upper: float
    K1: float
    K2: float
    delta0: float
    delta1: float
    phi_min: float
    kappa0: float
    estimated: bool
    delta1_certified: bool = True

    def to_dict(self) -> dict:
        out = {
            "L_lower": self.L_lower,
            "L_upper": self.L_upper,
            "K1": self.K1,
            "K2": self.K2,
            "delta0": self.delta0,
            "delta1": self.delta1,
            "phi_min": self.phi_min,
            "kappa0": self.kappa0,
            "estimated": self.estimated,
            "delta1_certified": self.delta1_certified,
        }
        return out


def _lprime_sq_mean(problem: DroProblem, beta: np.ndarray) -> float:
    u = problem.index_values(beta)
    y = problem.data.labels_or_nan()
    lp = np.asarray(problem.loss.dplus(u, y), dtype=float)
    return float(np.mean(lp * lp))


def _lprime_sq_grad(problem: DroProblem, beta: np.ndarray) -> np.ndarray:
    u = problem.index_values(beta)
    y = problem.data.labels_or_nan()
    lp = np.asarray(problem.loss.dplus(u, y), dtype=float)
    lpp = np.asarray(problem.loss.d2(u, y), dtype=float)
    return 2.0 * (problem.data.points.T @ (lp * lpp)) / problem.data.n


def estimate_L_bounds(
    problem: DroProblem,
    sphere_samples: int = 256,
    refine_steps: int = 60,
    seed: int = 0,
) -> tuple[float, float]:
    """Sampled extremes of beta -> E[loss'(beta'X)^2] over the decision ball.

    Directions on the radius-R_beta sphere plus near-zero points seed the
    search; the best candidates are polished with projected gradient steps
    (smooth losses only).  Returns (min, max) found.
    """
    rng = np.random.default_rng(seed)
    d, r = problem.data.d, problem.r_beta
    dirs = rng.standard_normal((max(int(sphere_samples), 8), d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cands = [r * v for v in dirs] + [1e-8 * r * v for v in dirs[:8]] + [np.zeros(d)]
    vals = np.array([_lprime_sq_mean(problem, b) for b in cands])

    def polish(beta0, sign):
        # sign=+1 descends (for the lower extreme), -1 ascends
        beta = beta0.copy()
        best = _lprime_sq_mean(problem, beta)
        step = 0.5 * r
        for _ in range(max(int(refine_steps), 0)):
            grad = _lprime_sq_grad(problem, beta)
            gn = np.linalg.norm(grad)
            if gn < 1e-16:
                break
            cand = beta - sign * step * grad / gn
            nrm = np.linalg.norm(cand)
            if nrm > r:
                cand = cand * (r / nrm)
            val = _lprime_sq_mean(problem, cand)
            if (val < best) if sign > 0 else (val > best):
                beta, best = cand, val
            else:
                step *= 0.5
        return best

    lo = float(np.min(vals))
    hi = float(np.max(vals))
    if problem.loss.smooth and refine_steps > 0:
        order = np.argsort(vals)
        for k in order[:4]:
            lo = min(lo, polish(cands[k], +1))
        for k in order[-4:]:
            hi = max(hi, polish(cands[k], -1))
    if lo <= 1e-14 * max(1.0, hi):
        raise ConfigError(
            "estimated lower derivative-energy bound is zero: some decision in the "
            "ball makes the loss derivative vanish on every sample"
        )
    return lo, hi


def lambda_thr(problem: DroProblem, beta: np.ndarray) -> float:
    """Multiplier below which the robust loss is infinite."""
    return domain_thresholds(problem, beta)[0]


def lambda_thr_prime(problem: DroProblem, beta: np.ndarray) -> float:
    """Multiplier above which the inner maximization is concave."""
    return domain_thresholds(problem, beta)[1]


def build_constants(
    problem: DroProblem,
    L_bounds: Optional[tuple] = None,
    sphere_samples: int = 256,
    refine_steps: int = 60,
    seed: int = 0,
) -> ConstantsBundle:
    """Assemble the constants bundle, estimating the L bounds when not given.

    Emits a warning (not an error) when delta >= delta0, where the smoothness
    regime is unavailable.
    """
    m = problem.loss.second_derivative_bound
    if m is None:
        raise ConfigError("constants require a loss with a bounded second derivative")
    estimated = L_bounds is None
    if L_bounds is None:
        L_bounds = estimate_L_bounds(problem, sphere_samples, refine_steps, seed)
    l_lo, l_hi = float(L_bounds[0]), float(L_bounds[1])
    if l_lo <= 0:
        raise ConfigError("L_lower must be positive")
    rho_min, rho_max = problem.cost.rho_min, problem.cost.rho_max
    r = problem.r_beta
    sd = problem.sqrt_delta

    k1 = 0.5 * math.sqrt(l_lo / rho_max)
    k2 = 0.5 * sd * m * r / rho_min + math.sqrt(l_hi / rho_min)
    delta0 = rho_min**2 * l_lo / (r**2 * m**2 * rho_max)
    phi_min = math.sqrt(l_lo) / math.sqrt(rho_max) - sd * r * m / rho_min
    kappa0 = 0.5 * l_lo / rho_max

    certified = problem.nondegeneracy is not None
    delta1 = delta0 / 4.0
    if certified:
        c1, c2, p = problem.nondegeneracy
        delta1 = min(
            delta1,
            c1**2 * c2**2 * p**2 * rho_min**2 * l_lo / (rho_max * l_hi**2 * 256.0),
        )
    if problem.delta >= delta0:
        warnings.warn(
            "ambiguity radius at or above delta0: smoothness regime unavailable",
            RuntimeWarning,
            stacklevel=2,
        )
    return ConstantsBundle(
        L_lower=l_lo,
        L_upper=l_hi,
        K1=k1,
        K2=k2,
        delta0=delta0,
        delta1=delta1,
        phi_min=phi_min,
        kappa0=kappa0,
        estimated=estimated,
        delta1_certified=certified,
    )


# --- projections -------------------------------------------------------------


def _segment_project(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return a
    t = float((p - a) @ ab) / denom
    t = min(max(t, 0.0), 1.0)
    return a + t * ab


def project_W(theta: Decision, consts: ConstantsBundle, r_beta: float) -> Decision:
    """Euclidean projection onto {||b|| <= R, K1||b|| <= lam <= K2*R}.

    The set is rotationally symmetric in beta, so the projection reduces to a
    planar projection of (||beta||, lambda) onto the trapezoid with vertices
    (0,0), (R, K1*R), (R, cap), (0, cap); the result keeps beta's direction.
    """
    k1, cap = consts.K1, consts.K2 * r_beta
    b = float(np.linalg.norm(theta.beta))
    l = float(theta.lam)
    if b <= r_beta and k1 * b <= l <= cap:
        return theta

    p = np.array([b, l])
    verts = [
        np.array([0.0, 0.0]),
        np.array([r_beta, k1 * r_beta]),
        np.array([r_beta, cap]),
        np.array([0.0, cap]),
    ]
    best, best_d = None, math.inf
    for a, bb in zip(verts, verts[1:] + verts[:1]):
        q = _segment_project(p, a, bb)
        dist = float(np.hypot(*(p - q)))
        if dist < best_d:
            best, best_d = q, dist
    b_new, l_new = float(best[0]), float(best[1])
    if b > 0.0:
        beta_new = theta.beta * (b_new / b)
    else:
        beta_new = np.zeros_like(theta.beta)
    return Decision(beta=beta_new, lam=max(l_new, 0.0))


def _project_parabola_band(b: float, l: float, q: float, eta: float, r: float):
    """Planar projection onto {0 <= t <= r, s >= q t^2 + eta}."""
    if b <= r and l >= q * b * b + eta:
        return b, l
    cands = [(0.0, eta)]
    # stationary points of the squared distance to the parabola arc
    roots = np.roots([2.0 * q * q, 0.0, 1.0 + 2.0 * q * (eta - l), -b])
    for t in roots:
        if abs(t.imag) < 1e-12:
            tr = float(t.real)
            if 0.0 <= tr <= r:
                cands.append((tr, q * tr * tr + eta))
    cands.append((r, max(l, q * r * r + eta)))
    cands.append((r, q * r * r + eta))
    best, best_d = None, math.inf
    for tb, tl in cands:
        dist = (tb - b) ** 2 + (tl - l) ** 2
        if dist < best_d:
            best, best_d = (tb, tl), dist
    return best


def _project_quadratic_epigraph(beta0, lam0, evals, evecs, eta):
    """Projection onto {lam >= beta' Q beta + eta} for SPD Q = V diag(w) V'."""
    z = evecs.T @ beta0

    def surplus(nu):
        zz = z / (1.0 + 2.0 * nu * evals)
        lam = lam0 + nu
        return lam - float(zz @ (evals * zz)) - eta

    if surplus(0.0) >= 0.0:
        return beta0.copy(), lam0
    hi = 1.0
    for _ in range(200):
        if surplus(hi) >= 0.0:
            break
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if surplus(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    nu = 0.5 * (lo + hi)
    beta = evecs @ (z / (1.0 + 2.0 * nu * evals))
    return beta, lam0 + nu


def project_U_eta(theta: Decision, problem: DroProblem, eta: float) -> Decision:
    """Projection onto {||beta|| <= R, lam >= lambda_thr(beta) + eta}.

    kappa = 0 losses give a box (radial clip plus a floor on lambda).  With
    kappa > 0 and a cost field whose threshold is a single quadratic, the
    planar parabola/epigraph projection is exact; the general callback kind
    falls back to Dykstra alternating projections and warns that the result
    is approximate.
    """
    if eta < 0:
        raise ConfigError("eta must be nonnegative")
    kappa = problem.loss.kappa
    r = problem.r_beta
    beta = theta.beta
    bnorm = float(np.linalg.norm(beta))

    if kappa == 0.0:
        beta_new = beta if bnorm <= r else beta * (r / bnorm)
        return Decision(beta=beta_new, lam=max(theta.lam, eta))

    cost = problem.cost
    sd = problem.sqrt_delta
    if cost.kind in ("identity", "scaled-identity"):
        q = kappa * sd * cost.max_quad_scale()
        b_new, l_new = _project_parabola_band(bnorm, float(theta.lam), q, eta, r)
        if bnorm > 0.0:
            beta_new = beta * (b_new / bnorm)
        else:
            beta_new = np.zeros_like(beta)
        return Decision(beta=beta_new, lam=l_new)
    if cost.kind == "constant":
        qmat = kappa * sd * cost.inv_matrix
        evals, evecs = np.linalg.eigh(qmat)
        beta_new, lam_new = _project_quadratic_epigraph(beta, float(theta.lam), evals, evecs, eta)
        if float(np.linalg.norm(beta_new)) <= r + 1e-15:
            return Decision(beta=beta_new, lam=lam_new)
        # ball binds: Dykstra between the epigraph and the cylinder
        return _dykstra_epigraph_ball(theta, evals, evecs, eta, r)

    warnings.warn(
        "per-sample cost field: U_eta projection is approximate (alternating projections)",
        RuntimeWarning,
        stacklevel=2,
    )
    return _dykstra_general(theta, problem, eta)


def _dykstra_epigraph_ball(theta, evals, evecs, eta, r, iters=500, tol=1e-14):
    x = theta.as_vector()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(iters):
        b, lam = _project_quadratic_epigraph((x + p)[:-1], (x + p)[-1], evals, evecs, eta)
        ynew = np.concatenate([b, [lam]])
        p = x + p - ynew
        nb = ynew[:-1] + q[:-1]
        nn = float(np.linalg.norm(nb))
        xb = nb if nn <= r else nb * (r / nn)
        xnew = np.concatenate([xb, [ynew[-1] + q[-1]]])
        q = ynew + q - xnew
        if float(np.linalg.norm(xnew - x)) < tol:
            x = xnew
            break
        x = xnew
    return Decision(beta=x[:-1], lam=max(float(x[-1]), 0.0))


def _dykstra_general(theta, problem, eta, iters=500, tol=1e-12):
    """Cyclic Dykstra over the n per-sample epigraphs and the beta ball."""
    kappa = problem.loss.kappa
    sd = problem.sqrt_delta
    n = problem.data.n
    mats = [kappa * sd * np.linalg.inv(problem.cost.matrices[i]) for i in range(n)]
    eigs = [np.linalg.eigh(m) for m in mats]
    sets = len(eigs) + 1
    x = theta.as_vector()
    corr = [np.zeros_like(x) for _ in range(sets)]
    for _ in range(iters):
        x_prev = x.copy()
        for s in range(sets):
            z = x + corr[s]
            if s < len(eigs):
                evals, evecs = eigs[s]
                b, lam = _project_quadratic_epigraph(z[:-1], z[-1], evals, evecs, eta)
                xn = np.concatenate([b, [lam]])
            else:
                nb = z[:-1]
                nn = float(np.linalg.norm(nb))
                bb = nb if nn <= problem.r_beta else nb * (problem.r_beta / nn)
                xn = np.concatenate([bb, [z[-1]]])
            corr[s] = z - xn
            x = xn
        if float(np.linalg.norm(x - x_prev)) < tol:
            break
    return Decision(beta=x[:-1], lam=max(float(x[-1]), 0.0))
