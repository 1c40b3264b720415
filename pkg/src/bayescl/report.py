"""Figure rendering for finished runs.

Reads the delimited outputs a run left behind and writes PNGs next to them;
nothing here re-runs any computation.  Headless-safe (Agg backend).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_run"]


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _accuracy_figure(path: Path, out: Path):
    _, rows = _read_csv(path)
    data = {}
    for seed, trained, evaluated, acc in rows:
        data.setdefault((int(trained), int(evaluated)), []).append(float(acc))
    n_tasks = max(tr for tr, _ in data) + 1
    fig, ax = plt.subplots(figsize=(6, 4))
    for ev in range(n_tasks):
        xs = [tr for tr in range(ev, n_tasks)]
        means = [np.mean(data[(tr, ev)]) for tr in xs]
        stds = [np.std(data[(tr, ev)]) for tr in xs]
        ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3,
                    label=f"task {ev}")
    avg = [np.mean([np.mean(data[(tr, ev)]) for ev in range(tr + 1)])
           for tr in range(n_tasks)]
    ax.plot(range(n_tasks), avg, "k--", linewidth=2, label="average")
    ax.set_xlabel("tasks trained")
    ax.set_ylabel("test accuracy")
    ax.set_xticks(range(n_tasks))
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def _losses_figure(path: Path, out: Path):
    _, rows = _read_csv(path)
    first_seed = rows[0][0]
    per_task = {}
    for seed, task, epoch, loss in rows:
        if seed != first_seed:
            continue
        per_task.setdefault(int(task), []).append((int(epoch), float(loss)))
    fig, ax = plt.subplots(figsize=(6, 4))
    for task, pts in sorted(per_task.items()):
        pts.sort()
        ax.plot([e for e, _ in pts], [lo for _, lo in pts], marker=".",
                label=f"task {task}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("objective")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def _heatmap_figure(path: Path, out: Path):
    _, rows = _read_csv(path)
    n_params = max(int(r[0]) for r in rows) + 1
    n_tasks = max(int(r[2]) for r in rows) + 1
    mat = np.zeros((n_params, n_tasks))
    layer_of = [""] * n_params
    for pi, layer, task, delta in rows:
        mat[int(pi), int(task)] = float(delta)
        layer_of[int(pi)] = layer
    fig, ax = plt.subplots(figsize=(5, 7))
    im = ax.imshow(mat, aspect="auto", cmap="coolwarm", interpolation="nearest",
                   vmin=-1.0, vmax=max(1e-9, mat.max()))
    # separators between parameter tensors
    bounds = [i for i in range(1, n_params) if layer_of[i] != layer_of[i - 1]]
    for b in bounds:
        ax.axhline(b - 0.5, color="k", linewidth=0.4)
    ax.set_xlabel("task")
    ax.set_ylabel("parameter index")
    ax.set_xticks(range(n_tasks))
    fig.colorbar(im, ax=ax, label="relative sigma change")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def _trajectory_figure(traj_path: Path, grid_path: Path, out: Path):
    _, trows = _read_csv(traj_path)
    fig, ax = plt.subplots(figsize=(6, 5))
    if grid_path.exists():
        _, grows = _read_csv(grid_path)
        ws = sorted({float(r[0]) for r in grows})
        bs = sorted({float(r[1]) for r in grows})
        grid = np.zeros((len(bs), len(ws)))
        wi = {w: i for i, w in enumerate(ws)}
        bi = {b: i for i, b in enumerate(bs)}
        for w, b, mse in grows:
            grid[bi[float(b)], wi[float(w)]] = float(mse)
        cs = ax.contourf(ws, bs, grid, levels=20, cmap="viridis", alpha=0.75)
        fig.colorbar(cs, ax=ax, label="average mse over tasks")
    series = {}
    for variant, step, mw, mb in trows:
        series.setdefault(variant, []).append((int(step), float(mw), float(mb)))
    for variant, pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[1] for p in pts], [p[2] for p in pts], linewidth=1.2,
                label=variant)
        ax.plot(pts[-1][1], pts[-1][2], "o", markersize=4, color="white",
                markeredgecolor="black")
    ax.set_xlabel("posterior mean of w")
    ax.set_ylabel("posterior mean of b")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def render_run(out_dir: Path):
    """Render every figure the directory's CSVs support; returns the paths
    written."""
    out_dir = Path(out_dir)
    written = []
    metrics = out_dir / "metrics.csv"
    if metrics.exists():
        _accuracy_figure(metrics, out_dir / "accuracy.png")
        written.append(out_dir / "accuracy.png")
    losses = out_dir / "losses.csv"
    if losses.exists():
        _losses_figure(losses, out_dir / "losses.png")
        written.append(out_dir / "losses.png")
    heatmap = out_dir / "heatmap.csv"
    if heatmap.exists():
        _heatmap_figure(heatmap, out_dir / "heatmap.png")
        written.append(out_dir / "heatmap.png")
    traj = out_dir / "trajectory.csv"
    if traj.exists():
        _trajectory_figure(traj, out_dir / "msegrid.csv",
                           out_dir / "trajectory.png")
        written.append(out_dir / "trajectory.png")
    return written
