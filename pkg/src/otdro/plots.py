"""Figure rendering for the CLI report path.

All figures are written as PNG with fixed metadata so repeated runs of the
same command produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = dict(dpi=120, metadata={"Software": "ot-dro"})


def render_gap_curves(rows, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ks = [r["k"] for r in rows]
    ax.loglog(ks, [max(r["gap_dro"], 1e-16) for r in rows], label="robust")
    ax.loglog(ks, [max(r["gap_plain"], 1e-16) for r in rows], label="plain", ls="--")
    ax.set_xlabel("iteration")
    ax.set_ylabel("optimality gap")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_trace(checkpoints, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ks = [c.k for c in checkpoints]
    ax.plot(ks, [c.f_delta for c in checkpoints], label="iterate", alpha=0.6)
    ax.plot(ks, [c.f_delta_bar for c in checkpoints], label="averaged")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_worstcase(rows, path):
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    deltas = sorted({r["delta"] for r in rows})
    cmap = plt.get_cmap("viridis")
    if "x_1" in rows[0]:
        for di, d in enumerate(deltas):
            sub = [r for r in rows if r["delta"] == d]
            ax.scatter(
                [r["xstar_0"] for r in sub],
                [r["xstar_1"] for r in sub],
                s=8,
                color=cmap(di / max(len(deltas) - 1, 1)),
                label=f"delta={d:g}",
            )
        ax.set_xlabel("coordinate 1")
        ax.set_ylabel("coordinate 2")
    else:
        for di, d in enumerate(deltas):
            sub = [r for r in rows if r["delta"] == d]
            ax.scatter(
                [r["xstar_0"] for r in sub],
                [d] * len(sub),
                s=8,
                color=cmap(di / max(len(deltas) - 1, 1)),
            )
        ax.set_xlabel("transported point")
        ax.set_ylabel("budget")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def render_frontier(points, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    kinds = sorted({p.cost_kind for p in points})
    deltas = sorted({p.delta for p in points})
    cmap = plt.get_cmap("tab10")
    for ki, kind in enumerate(kinds):
        for di, d in enumerate(deltas):
            sub = sorted(
                [p for p in points if p.cost_kind == kind and p.delta == d],
                key=lambda p: p.std_return,
            )
            if not sub:
                continue
            ax.plot(
                [p.std_return for p in sub],
                [p.mean_return for p in sub],
                marker="o",
                ms=3,
                ls="-" if kind == "constant" else "--",
                color=cmap(di % 10),
                label=f"{kind}, delta={d:g}",
            )
    ax.set_xlabel("annualized std")
    ax.set_ylabel("annualized mean")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
