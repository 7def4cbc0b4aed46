import numpy as np
import pytest

from otdro.experiments import (
    FrontierPoint,
    run_portfolio_frontier,
    run_supervised_experiment,
    run_worstcase_trace,
    synthetic_classification,
    synthetic_market,
)
from otdro.model import ConfigError


BASE_CFG = {
    "loss": "logistic",
    "delta": 0.05,
    "r_beta": 1.0,
    "data.n": 48,
    "data.d": 3,
    "iterations": 1200,
    "seed": 5,
    "step.alpha": 0.5,
    "step.tau": 0.55,
}


def test_supervised_experiment_shapes_and_determinism():
    r1 = run_supervised_experiment(dict(BASE_CFG))
    r2 = run_supervised_experiment(dict(BASE_CFG))
    assert len(r1.rows) == len(r2.rows) > 0
    for a, b in zip(r1.rows, r2.rows):
        assert a == b
    assert {"k", "f_dro_bar", "gap_dro", "f_plain_bar", "gap_plain"} <= set(r1.rows[0])


def test_supervised_hinge_dispatches_nonsmooth():
    cfg = dict(BASE_CFG, loss="hinge", eta=1e-3, iterations=800)
    res = run_supervised_experiment(cfg)
    assert res.trace_dro.meta["variant"] == "nonsmooth"
    # iterates respect the domain floor
    assert all(c.theta[-1] >= 1e-3 - 1e-12 for c in res.trace_dro.checkpoints)


def test_supervised_arms_share_sample_stream():
    # with identical seeds the plain arm must consume the same indices: check
    # by comparing against a fresh run whose seed differs
    res_same = run_supervised_experiment(dict(BASE_CFG))
    res_other = run_supervised_experiment(dict(BASE_CFG, seed=6))
    same = [r["f_plain_bar"] for r in res_same.rows]
    other = [r["f_plain_bar"] for r in res_other.rows]
    assert same != other


def test_worstcase_trace_delta_zero_rows_equal_raw():
    cfg = {
        "loss": "logistic", "delta": 0.05, "r_beta": 1.0, "data.n": 16, "data.d": 2,
        "iterations": 600, "seed": 2, "delta_grid": [0.04, 0.16],
    }
    res = run_worstcase_trace(cfg)
    zero_rows = [r for r in res.rows if r["delta"] == 0.0]
    assert len(zero_rows) == 16
    for r in zero_rows:
        assert r["x_0"] == r["xstar_0"] and r["x_1"] == r["xstar_1"]
        assert r["displacement"] == 0.0
        assert r["loss_before"] == r["loss_after"]


def test_worstcase_trace_misclassification_monotone():
    cfg = {
        "loss": "logistic", "delta": 0.05, "r_beta": 1.0, "data.n": 64, "data.d": 2,
        "iterations": 4000, "seed": 0, "delta_grid": [0.04, 0.25, 0.64, 1.44, 2.56],
    }
    res = run_worstcase_trace(cfg)
    rates = [m["misclassification_rate"] for m in res.misclassification]
    assert all(r2 >= r1 - 1e-12 for r1, r2 in zip(rates, rates[1:]))
    assert rates[-1] > rates[0]  # the adversary eventually flips points
    assert res.statics.monotonicity_violations == 0
    assert res.statics.min_direction_cosine >= 1 - 1e-10


def test_worstcase_trace_fixed_beta_validation():
    cfg = {
        "loss": "logistic", "delta": 0.05, "r_beta": 1.0, "data.n": 8, "data.d": 2,
        "beta": [0.5, -0.5, 1.0],
    }
    with pytest.raises(ConfigError):
        run_worstcase_trace(cfg)


def _min_variance_weights(window):
    cov = np.cov(window.T, ddof=1)
    ones = np.ones(cov.shape[0])
    w = np.linalg.solve(cov, ones)
    return w / float(ones @ w)


def test_portfolio_delta_zero_matches_min_variance_oracle():
    rets, vols = synthetic_market(26, 3, seed=4)
    pts = run_portfolio_frontier(
        rets, vols, window_months=24, zeta_grid=[0.0], delta_grid=[0.0],
        cost_kind="constant", seed=0,
    )
    assert len(pts) == 1
    # recompute the weights of the final window through the same reduction
    from otdro.experiments import _reduce_window, _solve_window_plain

    window = rets[1:25]
    z, y = _reduce_window(window)
    w_free = _solve_window_plain(z, y, 0.0, r_beta=5.0)
    w_full = np.concatenate([w_free, [1.0 - w_free.sum()]])
    w_oracle = _min_variance_weights(window)
    assert np.max(np.abs(w_full - w_oracle)) <= 1e-3
    assert w_full.sum() == pytest.approx(1.0, abs=1e-10)


def test_portfolio_identical_vols_make_cost_kinds_agree():
    rets, _ = synthetic_market(27, 3, seed=9)
    vols = np.full(27, 7.5)
    kw = dict(window_months=24, zeta_grid=[0.1], delta_grid=[0.005], iterations=300, seed=1)
    p_const = run_portfolio_frontier(rets, vols, cost_kind="constant", **kw)
    p_scaled = run_portfolio_frontier(rets, vols, cost_kind="implied-vol-scaled", **kw)
    assert p_const[0].mean_return == pytest.approx(p_scaled[0].mean_return, abs=1e-12)
    assert p_const[0].std_return == pytest.approx(p_scaled[0].std_return, abs=1e-12)


def test_portfolio_one_row_per_cell():
    rets, vols = synthetic_market(26, 3, seed=2)
    pts = run_portfolio_frontier(
        rets, vols, window_months=24, zeta_grid=[0.0, 0.1], delta_grid=[0.0, 0.004],
        cost_kind="both", iterations=150, seed=0,
    )
    keys = {(p.zeta, p.delta, p.cost_kind) for p in pts}
    assert len(pts) == len(keys) == 8
    assert all(isinstance(p, FrontierPoint) and p.std_return >= 0 for p in pts)


def test_portfolio_validation_errors():
    rets, vols = synthetic_market(30, 3, seed=0)
    with pytest.raises(ConfigError):
        run_portfolio_frontier(rets, vols, window_months=12, zeta_grid=[0], delta_grid=[0])
    with pytest.raises(ConfigError):
        run_portfolio_frontier(rets[:20], vols[:20], window_months=24, zeta_grid=[0],
                               delta_grid=[0])
    bad = rets.copy()
    bad[3, 1] = np.nan
    with pytest.raises(ConfigError):
        run_portfolio_frontier(bad, vols, window_months=24, zeta_grid=[0], delta_grid=[0])
    with pytest.raises(ConfigError):
        run_portfolio_frontier(rets, vols[:-2], window_months=24, zeta_grid=[0],
                               delta_grid=[0])


def test_synthetic_classification_reproducible():
    a = synthetic_classification(32, 4, seed=7)
    b = synthetic_classification(32, 4, seed=7)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)
    assert set(np.unique(a.labels)) <= {-1.0, 1.0}
