"""Coreset selection: random, k-center, and Stein points.

All three return ``(coreset, rest)`` where ``rest`` is the task's training
data with the selected rows removed, so coreset points never double as
training points regardless of method.

Stein points treat the coreset as a particle set in input space.  Particles
start at a random subset of the task data (labels frozen from those rows)
and then follow the kernelized update

    phi(x_l) = (1/M) sum_j [ k(x_j, x_l) score_j + grad_{x_j} k(x_j, x_l) ]

with the RBF kernel k(a, b) = exp(-||a - b||^2 / h); the first term pulls
particles toward high model likelihood, the second repels them from each
other.  ``h`` is re-estimated from the current particles every iteration via
the median heuristic.  Each iteration costs O(M^2 d) in the kernel plus M
model evaluations; the full dataset is only touched once, at initialization.
"""

from __future__ import annotations

import csv

import numpy as np

from .bnn import input_grad, make_noise_bundle
from .tasks import TaskData

__all__ = [
    "random_coreset",
    "kcenter_coreset",
    "median_heuristic",
    "stein_update",
    "stein_coreset",
    "write_coreset_csv",
    "read_coreset_csv",
]


def _check_m(data, m):
    if not 1 <= m <= len(data):
        raise ValueError(f"coreset size {m} outside [1, {len(data)}]")


def random_coreset(data: TaskData, m: int, rng):
    """Uniform sample without replacement."""
    _check_m(data, m)
    idx = rng.choice(len(data), size=m, replace=False)
    return data.subset(idx), data.without(idx)


def kcenter_coreset(data: TaskData, m: int):
    """Greedy farthest-first traversal seeded at row 0.

    Deterministic: each step adds the point farthest (euclidean) from the
    chosen set, which 2-approximates the k-center cover of the inputs.
    """
    _check_m(data, m)
    x = data.x
    chosen = [0]
    dmin = np.sum((x - x[0]) ** 2, axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.sum((x - x[nxt]) ** 2, axis=1))
    idx = np.asarray(chosen)
    return data.subset(idx), data.without(idx)


def _sq_dists(a, b):
    # ||a_i - b_j||^2 without forming the (i, j, d) tensor
    aa = np.sum(a**2, axis=1)[:, None]
    bb = np.sum(b**2, axis=1)[None, :]
    d2 = aa + bb - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def median_heuristic(points) -> float:
    """h = median of pairwise squared distances (i < j) / log(M + 1).

    Falls back to 1 when there are no pairs or the particles have collapsed
    onto one point (a zero bandwidth would break the kernel).
    """
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if m < 2:
        return 1.0
    d2 = _sq_dists(points, points)
    iu = np.triu_indices(m, k=1)
    med = float(np.median(d2[iu]))
    if med <= 0.0:
        return 1.0
    return med / np.log(m + 1.0)


def stein_update(particles, scores, h: float, step: float):
    """One kernelized particle step; returns the moved particles."""
    particles = np.asarray(particles, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if particles.shape != scores.shape:
        raise ValueError("stein_update: particles/scores shape mismatch")
    if h <= 0:
        raise ValueError("stein_update: bandwidth must be > 0")
    m = len(particles)
    k = np.exp(-_sq_dists(particles, particles) / h)
    # sum_j k(x_j, x_l) score_j  ->  K^T @ scores (K symmetric here)
    drive = k.T @ scores
    # sum_j (2/h) k(x_j, x_l) (x_l - x_j)
    repel = (2.0 / h) * (k.sum(axis=0)[:, None] * particles - k.T @ particles)
    phi = (drive + repel) / m
    return particles + step * phi


def stein_coreset(data: TaskData, m: int, q, steps: int, step_size: float, rng,
                  head: int = 0, n_mc: int = 3, clip=(0.0, 1.0)):
    """Synthesize a coreset by moving particles under the current posterior.

    Starts from a random subset of the task (those rows leave the training
    split); labels stay frozen while the inputs move.  Scores come from the
    Monte Carlo class-conditional log-likelihood gradient, so each particle
    drifts toward inputs its own label explains well.  Inputs are clipped to
    the data range after every step.
    """
    if steps < 0:
        raise ValueError("stein_coreset: steps must be >= 0")
    core, rest = random_coreset(data, m, rng)
    particles = core.x.copy()
    labels = core.y
    for _ in range(steps):
        noise = make_noise_bundle(q, n_mc, rng, heads=[head])
        scores = input_grad(q, particles, labels, noise, head=head)
        h = median_heuristic(particles)
        particles = stein_update(particles, scores, h, step_size)
        if clip is not None:
            np.clip(particles, clip[0], clip[1], out=particles)
    return TaskData(particles, labels), rest


def write_coreset_csv(path, entries):
    """Persist coresets so a later run can reuse the constructions.

    ``entries`` is an iterable of (task_id, TaskData); each CSV row is the
    flattened input followed by the label and the task id.  Values are
    written with Python's shortest round-trip float repr, so a read back
    reproduces the arrays exactly.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("write_coreset_csv: nothing to write")
    width = np.asarray(entries[0][1].x).reshape(len(entries[0][1]), -1).shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(width)] + ["label", "task"])
        for task_id, data in entries:
            x = np.asarray(data.x, dtype=np.float64).reshape(len(data), -1)
            if x.shape[1] != width:
                raise ValueError("write_coreset_csv: mixed input widths")
            for row, label in zip(x, data.y):
                w.writerow(list(row) + [label, int(task_id)])


def read_coreset_csv(path):
    """Inverse of write_coreset_csv: list of (task_id, TaskData), tasks in
    ascending order, row order preserved within each task.  Labels come back
    as integers whenever every label in the file is integral."""
    groups: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if not header or header[-2:] != ["label", "task"]:
            raise ValueError(f"{path}: not a coreset CSV")
        width = len(header) - 2
        for row in r:
            xs, ys = groups.setdefault(int(row[-1]), ([], []))
            xs.append([float(v) for v in row[:width]])
            ys.append(float(row[-2]))
    out = []
    for task_id in sorted(groups):
        xs, ys = groups[task_id]
        y = np.asarray(ys)
        if np.all(y == np.trunc(y)):
            y = y.astype(np.int64)
        out.append((task_id, TaskData(np.asarray(xs), y)))
    return out
