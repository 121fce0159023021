"""Report rendering: delimited text next to matplotlib figures.

Every pipeline that emits numbers writes them twice — a CSV for machines
and a PNG for people — into the same output directory.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_csv(path: str | Path, header: list[str], rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def sliding_mean(values: list[float], window: int = 100) -> list[float]:
    """Trailing mean over up to `window` previous entries (inclusive)."""
    out = []
    acc = 0.0
    buf: list[float] = []
    for v in values:
        buf.append(v)
        acc += v
        if len(buf) > window:
            acc -= buf.pop(0)
        out.append(acc / len(buf))
    return out


def training_curve_figure(rewards: list[float], path: str | Path,
                          window: int = 100, title: str = "") -> Path:
    """Per-episode reward with the sliding-window mean overlaid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    episodes = np.arange(1, len(rewards) + 1)
    ax.plot(episodes, rewards, lw=0.4, alpha=0.35, color="tab:gray",
            label="episode reward")
    ax.plot(episodes, sliding_mean(rewards, window), lw=1.6,
            color="tab:blue", label=f"{window}-episode mean")
    ax.set_xlabel("episode")
    ax.set_ylabel("reward")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def compare_figure(rows: list[dict], path: str | Path,
                   metric: str = "psoobv", title: str = "") -> Path:
    """Grouped bars of one metric per (agent, seed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    agents = sorted({r["agent"] for r in rows})
    seeds = sorted({r["seed"] for r in rows})
    width = 0.8 / max(len(seeds), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, seed in enumerate(seeds):
        xs, ys = [], []
        for i, agent in enumerate(agents):
            match = [r for r in rows if r["agent"] == agent and r["seed"] == seed]
            if match:
                xs.append(i + k * width)
                ys.append(match[0][metric])
        ax.bar(xs, ys, width=width * 0.9, label=f"seed {seed}")
    ax.set_xticks([i + width * (len(seeds) - 1) / 2 for i in range(len(agents))])
    ax.set_xticklabels(agents)
    ax.set_ylabel(metric.upper())
    if title:
        ax.set_title(title)
    if len(seeds) > 1:
        ax.legend(frameon=False)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def solution_table(case, solution) -> str:
    """Human-readable per-bus table for the powerflow subcommand."""
    from .netmodel import BusType

    lines = [f"{'bus':>5} {'type':>5} {'V (pu)':>9} {'angle (deg)':>12}"]
    for i, bus in enumerate(case.buses):
        btype = case.bus_types[i]
        tag = {BusType.SLACK: "slack", BusType.PV: "pv", BusType.PQ: "pq"}[btype]
        if solution.converged:
            lines.append(f"{bus.id:>5} {tag:>5} {solution.v[i]:>9.4f} "
                         f"{np.degrees(solution.theta[i]):>12.4f}")
        else:
            lines.append(f"{bus.id:>5} {tag:>5} {'-':>9} {'-':>12}")
    return "\n".join(lines)


def eval_table(rows: list[dict]) -> str:
    """Side-by-side text table of evaluation reports."""
    header = (f"{'agent':<10} {'seed':>6} {'PS':>7} {'PSOOBV':>8} "
              f"{'mean_rew':>9} {'acts/succ':>10} {'episodes':>9}")
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['agent']:<10} {r['seed']:>6} {r['ps']:>7.1f} "
            f"{r['psoobv']:>8.1f} {r['mean_reward']:>9.3f} "
            f"{r['mean_actions_per_success']:>10.2f} {r['n_episodes']:>9}")
    return "\n".join(lines)
