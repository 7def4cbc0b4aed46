"""Command-line interface: ot-dro train|compare|worstcase|frontier|constants|check.

Every command takes --config <json> and --out <dir> and writes CSV/JSON
outputs; --plot additionally renders PNG figures next to them.  Exit codes:
0 success, 2 configuration/validation error, 3 numerical failure.

Output files never embed wall-clock timings, so a fixed seed yields
byte-identical files across runs (timings stay available on the in-memory
traces).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .model import ConfigError, Decision, InfeasibleDomainError, NumericalError
from .optimizer import RunTrace, StepSchedule, sgd_nonsmooth, sgd_smooth, sgd_two_timescale
from .oracle import run_check_suite
from .regions import build_constants


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, rows, fieldnames=None) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return v


def _trace_records(trace: RunTrace) -> list:
    recs = []
    for c in trace.checkpoints:
        recs.append(
            {
                "k": c.k,
                "theta": [float(t) for t in c.theta],
                "theta_bar": [float(t) for t in c.theta_bar],
                "f_delta": c.f_delta,
                "f_delta_bar": c.f_delta_bar,
                "cuts": c.cuts,
                "elapsed_ms": None,
            }
        )
    return recs


def _write_trace(path: Path, trace: RunTrace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in _trace_records(trace):
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args)
    problem = experiments.build_problem(cfg)
    seed = int(cfg.get("seed", 0))
    iterations = int(cfg.get("iterations", 20_000))
    xi = float(cfg.get("step.xi", 0.0))
    variant = cfg.get("variant")
    if variant is None:
        variant = "nonsmooth" if problem.loss.name == "hinge" else "smooth"

    if variant == "smooth":
        consts = build_constants(problem, seed=seed)
        trace = sgd_smooth(
            problem, consts, experiments.schedule_from_config(cfg), xi=xi,
            iterations=iterations, seed=seed,
        )
    elif variant == "nonsmooth":
        schedule = StepSchedule(alpha=float(cfg.get("step.alpha", 0.5)), tau=0.5)
        trace = sgd_nonsmooth(
            problem, schedule, eta=float(cfg.get("eta", 1e-3)), xi=max(xi, 1.0),
            iterations=iterations, seed=seed,
        )
    elif variant == "two-timescale":
        consts = build_constants(problem, seed=seed)
        trace = sgd_two_timescale(
            problem,
            consts,
            experiments.schedule_from_config(cfg, "step"),
            experiments.schedule_from_config(cfg, "step2"),
            iterations=iterations,
            seed=seed,
        )
    else:
        raise ConfigError(f"unknown variant {variant!r}")

    _write_trace(out / "trace.jsonl", trace)
    last = trace.checkpoints[-1]
    _write_json(
        out / "summary.json",
        {
            "variant": variant,
            "seed": seed,
            "iterations": iterations,
            "theta": [float(t) for t in trace.final.as_vector()],
            "theta_bar": [float(t) for t in trace.final_bar.as_vector()],
            "f_delta": last.f_delta,
            "f_delta_bar": last.f_delta_bar,
        },
    )
    if args.plot:
        from . import plots

        plots.render_trace(trace.checkpoints, out / "trace.png")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args)
    result = experiments.run_supervised_experiment(cfg)
    _write_csv(out / "gap_curves.csv", result.rows)
    _write_json(
        out / "summary.json",
        {
            "loss": result.problem.loss.name,
            "delta": result.problem.delta,
            "n": result.problem.data.n,
            "d": result.problem.data.d,
            "final_gap_dro": result.rows[-1]["gap_dro"],
            "final_gap_plain": result.rows[-1]["gap_plain"],
        },
    )
    if args.plot:
        from . import plots

        plots.render_gap_curves(result.rows, out / "gap_curves.png")
    return 0


def cmd_worstcase(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args)
    result = experiments.run_worstcase_trace(cfg)
    _write_csv(out / "worstcase.csv", result.rows)
    if result.misclassification:
        _write_csv(out / "misclassification.csv", result.misclassification)
    _write_json(
        out / "summary.json",
        {
            "beta": [float(b) for b in result.beta],
            "deltas": [float(d) for d in result.statics.deltas],
            "flagged_deltas": result.statics.flagged,
            "monotonicity_violations": result.statics.monotonicity_violations,
            "min_direction_cosine": result.statics.min_direction_cosine,
        },
    )
    if args.plot:
        from . import plots

        plots.render_worstcase(result.rows, out / "worstcase.png")
    return 0


def cmd_frontier(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args)
    if "returns_csv" in cfg:
        rets = _read_matrix_csv(cfg["returns_csv"])
        vols = _read_matrix_csv(cfg["vol_csv"]).ravel()
    else:
        months = int(cfg.get("months", 72))
        assets = int(cfg.get("assets", 3))
        rets, vols = experiments.synthetic_market(months, assets, int(cfg.get("seed", 0)))
    points = experiments.run_portfolio_frontier(
        rets,
        vols,
        window_months=int(cfg.get("window_months", 24)),
        zeta_grid=cfg.get("zeta_grid", [0.0, 0.1]),
        delta_grid=cfg.get("delta_grid", [0.0, 0.01]),
        cost_kind=cfg.get("cost_kind", "both"),
        r_beta=float(cfg.get("r_beta", 5.0)),
        iterations=int(cfg.get("iterations", 1200)),
        seed=int(cfg.get("seed", 0)),
    )
    rows = [
        {
            "zeta": p.zeta,
            "delta": p.delta,
            "cost_kind": p.cost_kind,
            "mean_return": p.mean_return,
            "std_return": p.std_return,
        }
        for p in points
    ]
    _write_csv(out / "frontier.csv", rows)
    if args.plot:
        from . import plots

        plots.render_frontier(points, out / "frontier.png")
    return 0


def _read_matrix_csv(path: str) -> np.ndarray:
    from .model import load_csv

    data = load_csv(path)
    return data.points


def cmd_constants(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args)
    problem = experiments.build_problem(cfg)
    seed = int(cfg.get("seed", 0))
    if "L_lower" in cfg and "L_upper" in cfg:
        consts = build_constants(problem, (float(cfg["L_lower"]), float(cfg["L_upper"])))
    else:
        consts = build_constants(problem, seed=seed)
    payload = consts.to_dict()
    # alternative tabulated normalization of K2, kept for cross-checking
    payload["K2_alt"] = (
        problem.sqrt_delta * problem.loss.second_derivative_bound * problem.r_beta
        / problem.cost.rho_min
        + consts.L_upper / problem.cost.rho_min**0.5
    )
    payload["delta"] = problem.delta
    payload["r_beta"] = problem.r_beta
    payload["rho_min"] = problem.cost.rho_min
    payload["rho_max"] = problem.cost.rho_max
    payload["kappa"] = problem.loss.kappa
    payload["M"] = problem.loss.second_derivative_bound
    _write_json(out / "constants.json", payload)
    return 0


def cmd_check(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args)
    report = run_check_suite(seed=int(cfg.get("seed", 0)))
    _write_json(out / "check_report.json", report)
    if not report["passed"]:
        print("oracle check suite FAILED", file=sys.stderr)
        return 3
    return 0


COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "worstcase": cmd_worstcase,
    "frontier": cmd_frontier,
    "constants": cmd_constants,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ot-dro",
        description="Distributionally robust optimization over optimal-transport balls",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON configuration file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--plot", action="store_true", help="also render PNG figures")
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, InfeasibleDomainError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
