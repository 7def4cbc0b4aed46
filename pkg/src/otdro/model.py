"""Domain types: sample sets, loss specifications, transport cost fields, problems.

All loss callables are numpy-vectorized in both the index ``u`` and the label
``y``; labels ride along as loss parameters and are never transported.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "NumericalError",
    "InfeasibleDomainError",
    "NondifferentiablePointError",
    "SampleSet",
    "LossPiece",
    "LossSpec",
    "CostField",
    "DroProblem",
    "Decision",
    "make_logistic_loss",
    "make_squared_loss",
    "make_hinge_loss",
    "identity_cost",
    "constant_cost",
    "scaled_identity_cost",
    "callback_cost",
    "quadratic_form",
    "load_csv",
]


class ConfigError(ValueError):
    """Invalid problem configuration or input data."""


class NumericalError(RuntimeError):
    """A numerical routine failed to reach its contract."""


class InfeasibleDomainError(RuntimeError):
    """Requested an evaluation where the dual objective is infinite."""


class NondifferentiablePointError(RuntimeError):
    """The loss has a kink at the evaluation point; use the subgradient path."""


@dataclass(frozen=True)
class SampleSet:
    """A finite collection of d-dimensional points with optional scalar labels."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ConfigError("points must be a nonempty (n, d) array")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=float).ravel()
            if lab.shape[0] != pts.shape[0]:
                raise ConfigError(
                    f"label count {lab.shape[0]} does not match point count {pts.shape[0]}"
                )
            object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def label_or_nan(self, i: int) -> float:
        return float(self.labels[i]) if self.labels is not None else math.nan

    def labels_or_nan(self) -> np.ndarray:
        if self.labels is not None:
            return self.labels
        return np.full(self.n, math.nan)


@dataclass(frozen=True)
class LossPiece:
    """One smooth component of a piecewise loss u -> max_i piece_i(u; y).

    ``affine_slope`` is set when the piece is affine in u; it maps the label y
    to the slope, which unlocks the exact candidate enumeration used by the
    piecewise inner maximizer.
    """

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d2: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    affine_slope: Optional[Callable[[np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class LossSpec:
    """A univariate convex loss u -> loss(u; y) with one-sided derivatives.

    Attributes
    ----------
    value, dplus, dminus : callables (u, y) -> array
        Loss value and right/left derivatives; equal for smooth losses.
    d2 : callable or None
        Second derivative when it exists everywhere.
    components : tuple of LossPiece
        Smooth pieces whose pointwise max is the loss (K >= 1).
    kappa : float
        Quadratic growth rate: value(u,y) - kappa*u^2 is bounded above.
    second_derivative_bound : float or None
        Uniform bound M on d2, None when the loss has kinks.
    k1, k2 : float or None
        Growth constants for |u| * d2(u); k1 may be data-dependent and is
        filled in when the loss is bound to a sample set.
    """

    name: str
    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dplus: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dminus: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d2: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]]
    components: tuple
    kappa: float
    second_derivative_bound: Optional[float]
    k1: Optional[float] = None
    k2: Optional[float] = None

    @property
    def smooth(self) -> bool:
        return self.d2 is not None

    @property
    def piecewise_affine(self) -> bool:
        return all(p.affine_slope is not None for p in self.components)

    def deriv(self, u, y):
        """Derivative for smooth losses; dplus where a kink could occur."""
        return self.dplus(u, y)

    def subgradient_interval(self, u, y):
        return self.dminus(u, y), self.dplus(u, y)

    def bind(self, data: SampleSet) -> "LossSpec":
        """Fill data-dependent constants (k1 for the squared loss)."""
        if self.name == "squared" and self.k1 is None:
            if data.labels is None:
                raise ConfigError("squared loss requires labels")
            return replace(self, k1=float(np.max(np.abs(data.labels))))
        return self

    def growth_offset(self, y: float, slack: float) -> float:
        """Numeric C with value(u,y) <= (kappa + slack/2) u^2 + C on a wide grid."""
        grid = _log_grid(1e6, 220)
        vals = self.value(grid, np.full_like(grid, y)) - (self.kappa + 0.5 * slack) * grid**2
        return float(np.max(vals))


def _log_grid(umax: float, half_points: int) -> np.ndarray:
    mag = np.geomspace(1e-8, umax, half_points)
    return np.concatenate([-mag[::-1], [0.0], mag])


def _as_arrays(u, y):
    return np.asarray(u, dtype=float), np.asarray(y, dtype=float)


def make_logistic_loss() -> LossSpec:
    """Binary-classification log loss log(1 + exp(-y*u)) with labels in {-1, +1}."""

    def value(u, y):
        u, y = _as_arrays(u, y)
        return np.logaddexp(0.0, -y * u)

    def deriv(u, y):
        u, y = _as_arrays(u, y)
        # -y * sigma(-y u), computed stably through tanh
        return -y * 0.5 * (1.0 - np.tanh(0.5 * y * u))

    def d2(u, y):
        u, y = _as_arrays(u, y)
        s = 0.5 * (1.0 - np.tanh(0.5 * y * u))
        return y * y * s * (1.0 - s)

    piece = LossPiece(value=value, deriv=deriv, d2=d2)
    return LossSpec(
        name="logistic",
        value=value,
        dplus=deriv,
        dminus=deriv,
        d2=d2,
        components=(piece,),
        kappa=0.0,
        second_derivative_bound=0.25,
        k1=1.0,
        k2=1.0,
    )


def make_squared_loss() -> LossSpec:
    """Regression loss (y - u)^2; k1 is filled when bound to data."""

    def value(u, y):
        u, y = _as_arrays(u, y)
        return (u - y) ** 2

    def deriv(u, y):
        u, y = _as_arrays(u, y)
        return 2.0 * (u - y)

    def d2(u, y):
        u, _ = _as_arrays(u, y)
        return np.full_like(u, 2.0)

    piece = LossPiece(value=value, deriv=deriv, d2=d2)
    return LossSpec(
        name="squared",
        value=value,
        dplus=deriv,
        dminus=deriv,
        d2=d2,
        components=(piece,),
        kappa=1.0,
        second_derivative_bound=2.0,
        k1=None,
        k2=1.0,
    )


def make_hinge_loss() -> LossSpec:
    """Margin loss max(0, 1 - y*u) with a kink at y*u = 1."""

    def value(u, y):
        u, y = _as_arrays(u, y)
        return np.maximum(0.0, 1.0 - y * u)

    def dminus(u, y):
        u, y = _as_arrays(u, y)
        m = y * u
        return np.where(m < 1.0, -y, np.where(m > 1.0, 0.0, np.minimum(-y, 0.0)))

    def dplus(u, y):
        u, y = _as_arrays(u, y)
        m = y * u
        return np.where(m < 1.0, -y, np.where(m > 1.0, 0.0, np.maximum(-y, 0.0)))

    flat = LossPiece(
        value=lambda u, y: np.zeros_like(np.asarray(u, dtype=float)),
        deriv=lambda u, y: np.zeros_like(np.asarray(u, dtype=float)),
        affine_slope=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
    )
    margin = LossPiece(
        value=lambda u, y: 1.0 - np.asarray(y, dtype=float) * np.asarray(u, dtype=float),
        deriv=lambda u, y: -np.asarray(y, dtype=float) * np.ones_like(np.asarray(u, dtype=float)),
        affine_slope=lambda y: -np.asarray(y, dtype=float),
    )
    return LossSpec(
        name="hinge",
        value=value,
        dplus=dplus,
        dminus=dminus,
        d2=None,
        components=(flat, margin),
        kappa=0.0,
        second_derivative_bound=None,
        k1=None,
        k2=None,
    )


@dataclass(frozen=True)
class CostField:
    """Per-point positive-definite transport cost matrices A(x).

    Three concrete kinds are supported (identity, constant, per-sample scaled
    identity); a general callback kind is accepted provided the caller supplies
    the spectral bounds rho_min and rho_max, which the framework assumes but
    never computes.
    """

    kind: str
    rho_min: float
    rho_max: float
    matrix: Optional[np.ndarray] = None
    scales: Optional[np.ndarray] = None
    inv_matrix: Optional[np.ndarray] = field(default=None, repr=False)
    matrices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.rho_min <= 0 or self.rho_max < self.rho_min:
            raise ConfigError("need 0 < rho_min <= rho_max")

    # --- quadratic form a(beta; x_i) = beta^T A(x_i)^{-1} beta -------------

    def quad(self, beta: np.ndarray, i: int) -> float:
        """beta^T A(x_i)^{-1} beta for one sample."""
        if self.kind == "identity":
            return float(beta @ beta)
        if self.kind == "constant":
            return float(beta @ (self.inv_matrix @ beta))
        if self.kind == "scaled-identity":
            return float(beta @ beta) / float(self.scales[i])
        return float(beta @ np.linalg.solve(self.matrices[i], beta))

    def quad_all(self, beta: np.ndarray, n: int) -> np.ndarray:
        """Vector of quadratic forms over all n samples."""
        if self.kind == "identity":
            return np.full(n, float(beta @ beta))
        if self.kind == "constant":
            return np.full(n, float(beta @ (self.inv_matrix @ beta)))
        if self.kind == "scaled-identity":
            return float(beta @ beta) / self.scales
        return np.array(
            [float(beta @ np.linalg.solve(self.matrices[k], beta)) for k in range(n)]
        )

    def inv_apply(self, beta: np.ndarray, i: int) -> np.ndarray:
        """A(x_i)^{-1} beta."""
        if self.kind == "identity":
            return beta
        if self.kind == "constant":
            return self.inv_matrix @ beta
        if self.kind == "scaled-identity":
            return beta / float(self.scales[i])
        return np.linalg.solve(self.matrices[i], beta)

    def cost(self, i: int, x: np.ndarray, x_prime: np.ndarray) -> float:
        """(x - x')^T A(x_i) (x - x')."""
        dx = np.asarray(x, dtype=float) - np.asarray(x_prime, dtype=float)
        if self.kind == "identity":
            return float(dx @ dx)
        if self.kind == "constant":
            return float(dx @ (self.matrix @ dx))
        if self.kind == "scaled-identity":
            return float(self.scales[i]) * float(dx @ dx)
        return float(dx @ (self.matrices[i] @ dx))

    @property
    def single_quadratic(self) -> bool:
        """True when max_i beta^T A_i^{-1} beta is itself a fixed quadratic in beta."""
        return self.kind in ("identity", "constant", "scaled-identity")

    def max_quad_scale(self) -> float:
        """For (scaled-)identity kinds: max_i a(beta; x_i) = scale * ||beta||^2."""
        if self.kind == "identity":
            return 1.0
        if self.kind == "scaled-identity":
            return 1.0 / float(np.min(self.scales))
        raise ConfigError("not a scaled-identity cost field")


def _check_spd(mat: np.ndarray, lo: float, hi: float, tol: float = 1e-10) -> None:
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ConfigError("cost matrix must be symmetric")
    eig = np.linalg.eigvalsh(mat)
    if eig[0] <= 0:
        raise ConfigError("cost matrix must be positive definite")
    if eig[0] < lo - tol or eig[-1] > hi + tol:
        raise ConfigError(
            f"cost matrix eigenvalues [{eig[0]:g}, {eig[-1]:g}] outside [{lo:g}, {hi:g}]"
        )


def identity_cost() -> CostField:
    return CostField(kind="identity", rho_min=1.0, rho_max=1.0)


def constant_cost(matrix: Sequence[Sequence[float]]) -> CostField:
    mat = np.asarray(matrix, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ConfigError("cost matrix must be square")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ConfigError("cost matrix must be symmetric")
    eig = np.linalg.eigvalsh(mat)
    if eig[0] <= 0:
        raise ConfigError("cost matrix must be positive definite")
    return CostField(
        kind="constant",
        rho_min=float(eig[0]),
        rho_max=float(eig[-1]),
        matrix=mat,
        inv_matrix=np.linalg.inv(mat),
    )


def scaled_identity_cost(volatilities: Sequence[float]) -> CostField:
    """A_i = (mean(V)/V_i) * I, cheaper transport where volatility V_i is high."""
    vols = np.asarray(volatilities, dtype=float).ravel()
    if np.any(vols <= 0):
        raise ConfigError("volatilities must be positive")
    scales = float(np.mean(vols)) / vols
    return CostField(
        kind="scaled-identity",
        rho_min=float(np.min(scales)),
        rho_max=float(np.max(scales)),
        scales=scales,
    )


def callback_cost(matrices: Sequence[np.ndarray], rho_min: float, rho_max: float) -> CostField:
    """Arbitrary per-sample SPD matrices; spectral bounds must be supplied."""
    mats = np.asarray(matrices, dtype=float)
    for k in range(mats.shape[0]):
        _check_spd(mats[k], rho_min, rho_max)
    return CostField(kind="callback", rho_min=float(rho_min), rho_max=float(rho_max), matrices=mats)


def quadratic_form(cost: CostField, x_index: int, beta: np.ndarray) -> float:
    """beta^T A(x_i)^{-1} beta for sample x_index."""
    beta = np.asarray(beta, dtype=float)
    return float(cost.quad(beta, x_index))


@dataclass(frozen=True)
class Decision:
    """Decision vector plus dual transport multiplier, the optimizer state.

    A projected optimizer keeps lam >= 0 and ||beta|| within the ball; raw
    pre-projection points may violate both, so no bound is enforced here.
    """

    beta: np.ndarray
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        object.__setattr__(self, "lam", float(self.lam))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, [self.lam]])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Decision":
        v = np.asarray(v, dtype=float).ravel()
        return Decision(beta=v[:-1], lam=max(v[-1], 0.0))


@dataclass(frozen=True)
class DroProblem:
    """A robust estimation problem: data, transport cost, loss, budget, ball radius."""

    data: SampleSet
    cost: CostField
    loss: LossSpec
    delta: float
    r_beta: float
    nondegeneracy: Optional[tuple] = None

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigError("ambiguity radius delta must be positive")
        if self.r_beta <= 0:
            raise ConfigError("decision radius r_beta must be positive")
        if self.cost.kind == "scaled-identity" and len(self.cost.scales) != self.data.n:
            raise ConfigError("per-sample cost scales must match the sample count")
        if self.cost.kind == "callback" and len(self.cost.matrices) != self.data.n:
            raise ConfigError("per-sample cost matrices must match the sample count")
        if self.nondegeneracy is not None:
            c1, c2, p = self.nondegeneracy
            if c1 <= 0 or c2 <= 0 or not (0.0 < p < 1.0):
                raise ConfigError("nondegeneracy constants need c1, c2 > 0 and p in (0, 1)")
        object.__setattr__(self, "loss", self.loss.bind(self.data))

    @property
    def sqrt_delta(self) -> float:
        return math.sqrt(self.delta)

    def index_values(self, beta: np.ndarray) -> np.ndarray:
        """beta^T X_i for all samples."""
        return self.data.points @ np.asarray(beta, dtype=float)


def load_csv(path: str, schema: Optional[dict] = None) -> SampleSet:
    """Read a UTF-8, comma-separated file with one header row into a SampleSet.

    ``schema`` may name a label column ({"label": "y"}) and optionally restrict
    the feature columns ({"features": [...]}); by default every non-label
    column is a feature.
    """
    schema = schema or {}
    label_col = schema.get("label")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        feature_cols = schema.get("features")
        if feature_cols is None:
            feature_cols = [h for h in header if h != label_col]
        missing = [c for c in feature_cols if c not in header]
        if missing:
            raise ConfigError(f"{path}: unknown feature columns {missing}")
        if label_col is not None and label_col not in header:
            raise ConfigError(f"{path}: unknown label column {label_col!r}")
        fidx = [header.index(c) for c in feature_cols]
        lidx = header.index(label_col) if label_col is not None else None

        rows, labels = [], []
        for rno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ConfigError(
                    f"{path}: row {rno} has {len(row)} cells, expected {len(header)}"
                )
            try:
                rows.append([float(row[j]) for j in fidx])
            except ValueError:
                j_bad = next(j for j in fidx if not _is_float(row[j]))
                raise ConfigError(
                    f"{path}: row {rno}, column {header[j_bad]!r}: "
                    f"non-numeric cell {row[j_bad]!r}"
                ) from None
            if lidx is not None:
                if not _is_float(row[lidx]):
                    raise ConfigError(
                        f"{path}: row {rno}: non-numeric label {row[lidx]!r} in column {label_col!r}"
                    )
                labels.append(float(row[lidx]))
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return SampleSet(points=np.asarray(rows), labels=np.asarray(labels) if labels else None)


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False
