"""Sequential variational training over a task stream.

The protocol per task t:

1. warm-start the posterior from task t-1 (fresh init on the first task),
   growing a new head first if the task demands one;
2. optionally carve a coreset out of the task's training split (the selected
   rows never re-enter training, whatever the method);
3. minimize  -loglik(D_t) + KL(q || q_{t-1})  by minibatch gradient steps,
   each batch carrying a B/N share of the KL so the per-epoch sum equals the
   full objective.  In regret mode the replayed coresets of tasks < t join
   the loss as an extra likelihood term with the same B/N amortization and
   no further coefficient;
4. evaluate on every task seen so far, through a disposable copy fine-tuned
   on the stored coresets when the run uses them for prediction rather than
   replay.

Heads other than the current task's are frozen by zeroing their gradients
before the optimizer step; with fresh zero optimizer state that pins them
bit for bit.  All randomness flows through seed-and-label derived streams,
so reruns reproduce every float and adding a consumer (e.g. the regret term)
cannot shift any other stream -- with no stored coresets the regret run
consumes exactly the streams a plain run does, making the two traces
identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bnn import (
    MeanField,
    add_head,
    data_term_grads,
    elbo_and_grads,
    init_mean_field,
    make_noise_bundle,
    predict,
    standard_prior,
)
from .config import ExperimentConfig
from .core_math import NumericalError, make_rng
from .coresets import kcenter_coreset, random_coreset, stein_coreset
from .optimizers import SGD, Adam, compose, gng_transform
from .tasks import TaskData, TaskSplit, linreg_sequence

__all__ = [
    "ContinualResult",
    "LinregResult",
    "build_optimizer",
    "prepare_posterior",
    "train_task",
    "finetune_prediction_model",
    "evaluate",
    "run_continual",
    "variance_heatmap",
    "linreg_trajectory",
]


def build_optimizer(config: ExperimentConfig, lr=None, gng=None):
    lr = config.lr if lr is None else lr
    gng = config.gng if gng is None else gng
    base = Adam(lr=lr) if config.optimizer == "adam" else SGD(lr=lr)
    return compose(gng_transform, base) if gng else base


def prepare_posterior(q_prev, task: TaskSplit, config: ExperimentConfig,
                      seed: int, task_index: int, likelihood="categorical"):
    """Warm-started posterior plus its anchor for one task.

    First task: fresh init against the unit-Gaussian prior.  Later tasks:
    copy of the previous posterior anchored to itself; a head the anchor has
    never seen gets a fresh init in the posterior and a unit Gaussian in the
    anchor.
    """
    if q_prev is None:
        d_in = task.train.x.shape[1]
        widths = (d_in, *config.hidden)
        q = init_mean_field(widths, config.head_width, task.head + 1,
                            config.sigma0, make_rng(seed, "init"),
                            likelihood=likelihood, noise_var=config.noise_var)
        return q, standard_prior(q)
    q = q_prev.copy()
    prior = q_prev.copy()
    while q.n_heads <= task.head:
        h = add_head(q, config.sigma0, make_rng(seed, "head", q.n_heads))
        for k in q.head_keys(h):
            prior.mu[k] = np.zeros_like(q.mu[k])
            prior.v[k] = np.zeros_like(q.v[k])
    return q, prior


def _freeze_other_heads(grads, q: MeanField, active_head: int):
    for h in range(q.n_heads):
        if h == active_head:
            continue
        for k in q.head_keys(h):
            grads["mu"][k][...] = 0.0
            grads["v"][k][...] = 0.0


def train_task(q_prev, task: TaskSplit, coreset_union, mode: str,
               config: ExperimentConfig, seed: int = 0, task_index: int = 0,
               prepared=None):
    """Train one task; returns (posterior, per-epoch loss list).

    ``coreset_union`` is a list of (TaskData, head) replay sets from earlier
    tasks; it only enters the loss when ``mode == "regret"``.  ``prepared``
    lets the caller pass a posterior/anchor pair it already built (needed
    when coreset selection had to see the warm-started model first).
    """
    if mode not in ("none", "finetune", "regret"):
        raise ValueError(f"train_task: unknown mode {mode!r}")
    q, prior = prepared if prepared is not None else prepare_posterior(
        q_prev, task, config, seed, task_index)

    opt = build_optimizer(config)
    opt.reset(q)
    rng_shuffle = make_rng(seed, "shuffle", task_index)
    rng_noise = make_rng(seed, "noise", task_index)
    rng_regret = make_rng(seed, "regret", task_index)

    x, y = task.train.x, task.train.y
    n = len(x)
    if n == 0:
        raise ValueError("train_task: empty training split")
    bs = min(config.batch_size, n)
    replay = [c for c in coreset_union if len(c[0]) > 0] if mode == "regret" else []

    epoch_losses = []
    for _ in range(config.epochs):
        order = rng_shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            share = len(idx) / n
            noise = make_noise_bundle(q, config.train_mc, rng_noise,
                                      heads=[task.head])
            loss, grads = elbo_and_grads(q, prior, (x[idx], y[idx]), noise,
                                         kl_scale=share, head=task.head)
            for cdata, chead in replay:
                cnoise = make_noise_bundle(q, config.train_mc, rng_regret,
                                           heads=[chead])
                closs, cgrads = data_term_grads(q, (cdata.x, cdata.y), cnoise,
                                                head=chead)
                loss += share * closs
                for fam in ("mu", "v"):
                    for k in grads[fam]:
                        grads[fam][k] += share * cgrads[fam][k]
            if not np.isfinite(loss):
                raise NumericalError(
                    f"train_task: non-finite loss at task {task_index}")
            _freeze_other_heads(grads, q, task.head)
            opt.step(q, grads)
            total += loss
        epoch_losses.append(total)
    return q, epoch_losses


def finetune_prediction_model(q_star, coresets, config: ExperimentConfig,
                              seed: int = 0, task_index: int = 0):
    """Disposable prediction model: copy of the live posterior fine-tuned on
    the stored coresets, anchored to the posterior it came from.  The live
    posterior is never touched, so nothing here propagates to later tasks.
    """
    usable = [c for c in coresets if len(c[0]) > 0]
    if not usable:
        return q_star
    q = q_star.copy()
    prior = q_star.copy()
    n_union = sum(len(c[0]) for c in usable)
    opt = build_optimizer(config)
    opt.reset(q)
    rng_shuffle = make_rng(seed, "finetune-shuffle", task_index)
    rng_noise = make_rng(seed, "finetune-noise", task_index)
    epochs = config.finetune_epochs or config.epochs
    bs = config.batch_size
    for _ in range(epochs):
        for cdata, chead in usable:
            order = rng_shuffle.permutation(len(cdata))
            for start in range(0, len(cdata), bs):
                idx = order[start:start + bs]
                share = len(idx) / n_union
                noise = make_noise_bundle(q, config.train_mc, rng_noise,
                                          heads=[chead])
                loss, grads = elbo_and_grads(
                    q, prior, (cdata.x[idx], cdata.y[idx]), noise,
                    kl_scale=share, head=chead)
                if not np.isfinite(loss):
                    raise NumericalError("finetune: non-finite loss")
                opt.step(q, grads)
    return q


def evaluate(q, tasks_seen, n_samples: int, rng):
    """Accuracy (categorical) or mean squared error (gaussian) on each seen
    task's test split, via the task's own head."""
    out = []
    for task in tasks_seen:
        pred = predict(q, task.test.x, n_samples, rng, head=task.head)
        if q.likelihood == "categorical":
            out.append(float(np.mean(pred.argmax(axis=1) == task.test.y)))
        else:
            y = np.asarray(task.test.y, dtype=np.float64).reshape(pred.shape)
            out.append(float(np.mean((pred - y) ** 2)))
    return np.asarray(out)


def _select_coreset(train: TaskData, q, task: TaskSplit,
                    config: ExperimentConfig, seed: int, task_index: int):
    m = min(config.coreset_size, len(train) - 1)
    rng = make_rng(seed, "coreset", task_index)
    if config.coreset == "random":
        return random_coreset(train, m, rng)
    if config.coreset == "kcenter":
        return kcenter_coreset(train, m)
    if config.coreset == "stein":
        return stein_coreset(train, m, q, config.stein_steps,
                             config.stein_step_size, rng, head=task.head,
                             n_mc=config.stein_mc)
    raise ValueError(f"unknown coreset method {config.coreset!r}")


@dataclass
class ContinualResult:
    metrics: list = field(default_factory=list)   # (seed, trained, eval, accuracy)
    losses: list = field(default_factory=list)    # (seed, task, epoch, loss)
    snapshots: dict = field(default_factory=dict)  # seed -> [key->sigma per task]
    finals: dict = field(default_factory=dict)     # seed -> final posterior
    coresets: dict = field(default_factory=dict)   # seed -> [(task, TaskData)]
    timings: dict = field(default_factory=dict)    # seed -> wall seconds

    def accuracy(self, seed, trained, evaluated):
        for s, tr, ev, acc in self.metrics:
            if (s, tr, ev) == (seed, trained, evaluated):
                return acc
        raise KeyError((seed, trained, evaluated))

    def avg_final_accuracy(self, seed) -> float:
        last = max(tr for s, tr, _, _ in self.metrics if s == seed)
        vals = [acc for s, tr, _, acc in self.metrics
                if s == seed and tr == last]
        return float(np.mean(vals))


def run_continual(stream, config: ExperimentConfig) -> ContinualResult:
    """Run the full protocol for every seed in the config over a prepared
    task stream (list of TaskSplit)."""
    result = ContinualResult()
    for seed in config.seeds:
        t_seed = time.perf_counter()
        q = None
        stored = []   # (TaskData, head) per task with a coreset
        sigma_track = []
        core_track = []
        for t, task in enumerate(stream):
            train = task.train
            if config.subsample and len(train) > config.subsample:
                idx = make_rng(seed, "subsample", t).choice(
                    len(train), size=config.subsample, replace=False)
                train = train.subset(idx)

            q_next, prior = prepare_posterior(q, task, config, seed, t)
            if config.coreset != "none":
                core, train = _select_coreset(train, q_next, task, config,
                                              seed, t)
            else:
                core = None

            task_t = replace(task, train=train)
            mode = config.coreset_mode if config.coreset != "none" else "none"
            q_next, epoch_losses = train_task(
                None, task_t, stored, mode, config, seed=seed, task_index=t,
                prepared=(q_next, prior))
            for e, lo in enumerate(epoch_losses):
                result.losses.append((seed, t, e, lo))
            if core is not None:
                stored.append((core, task.head))
                core_track.append((t, core))

            if config.coreset != "none" and config.coreset_mode == "finetune":
                q_eval = finetune_prediction_model(q_next, stored, config,
                                                   seed=seed, task_index=t)
            else:
                q_eval = q_next
            accs = evaluate(q_eval, stream[:t + 1], config.eval_samples,
                            make_rng(seed, "eval", t))
            for ev, acc in enumerate(accs):
                result.metrics.append((seed, t, ev, acc))

            sigma_track.append({k: np.exp(q_next.v[k]).copy()
                                for k in q_next.keys()})
            q = q_next
        result.snapshots[seed] = sigma_track
        result.finals[seed] = q
        result.coresets[seed] = core_track
        result.timings[seed] = time.perf_counter() - t_seed
    return result


def save_snapshots(path, snapshots):
    """Store one seed's per-task sigma snapshots as a single indexed binary.

    Entries are named ``t{task}:{key}`` inside a compressed npz archive, so
    the file carries its own index and loads without knowing the layout.
    """
    arrays = {}
    for t, snap in enumerate(snapshots):
        for k, a in snap.items():
            arrays[f"t{t}:{k}"] = np.asarray(a)
    if not arrays:
        raise ValueError("save_snapshots: nothing to save")
    np.savez_compressed(path, **arrays)


def load_snapshots(path):
    """Inverse of save_snapshots: list of key -> sigma dicts, task order."""
    out: list = []
    with np.load(path) as z:
        for name in z.files:
            tpart, key = name.split(":", 1)
            t = int(tpart[1:])
            while len(out) <= t:
                out.append({})
            out[t][key] = z[name]
    if any(not snap for snap in out):
        raise ValueError(f"{path}: snapshot task index has gaps")
    return out


def variance_heatmap(snapshots):
    """Relative change of each posterior standard deviation across tasks.

    ``snapshots`` is a list (one entry per task) of key -> sigma arrays.
    With M = the largest sigma anywhere in the first snapshot, the cell for
    parameter i at task t is (sigma_{i,t} - M) / M: the anchor parameter
    reads 0 at the first task and a parameter at half the anchor reads -0.5.
    Only keys present in the first snapshot are tracked, so later head
    growth does not change the row set.  Returns (delta, labels) where delta
    is (n_params, n_tasks) and labels[i] is the owning tensor's key.
    """
    if not snapshots:
        raise ValueError("variance_heatmap: no snapshots")
    keys = sorted(snapshots[0])
    labels = []
    for k in keys:
        labels.extend([k] * snapshots[0][k].size)
    cols = []
    for snap in snapshots:
        cols.append(np.concatenate([np.asarray(snap[k]).ravel() for k in keys]))
    mat = np.stack(cols, axis=1)
    anchor = mat[:, 0].max()
    if anchor <= 0:
        raise ValueError("variance_heatmap: non-positive anchor sigma")
    return (mat - anchor) / anchor, labels


LINREG_VARIANTS = ("sgd", "adam", "sgd_gng", "adam_gng")


@dataclass
class LinregResult:
    trajectories: dict = field(default_factory=dict)  # variant -> (steps, 2)
    update_norms: dict = field(default_factory=dict)  # variant -> (steps,)
    avg_mse: dict = field(default_factory=dict)       # variant -> float
    losses: dict = field(default_factory=dict)        # variant -> (steps,)
    steps_per_task: int = 0

    def trajectory_rows(self):
        rows = []
        for variant in LINREG_VARIANTS:
            for step, (mw, mb) in enumerate(self.trajectories[variant]):
                rows.append((variant, step, mw, mb))
        return rows


def _linreg_optimizer(variant: str):
    # the plain-SGD path needs the smaller rate; everything else shares one
    if variant == "sgd":
        return SGD(lr=1e-3)
    if variant == "sgd_gng":
        return compose(gng_transform, SGD(lr=1e-2))
    if variant == "adam":
        return Adam(lr=1e-2)
    if variant == "adam_gng":
        return compose(gng_transform, Adam(lr=1e-2))
    raise ValueError(f"unknown linreg variant {variant!r}")


def linreg_trajectory(run: int, config: ExperimentConfig) -> LinregResult:
    """Scalar-regression posterior-mean trajectories for the four optimizer
    variants, sharing init, data and noise draws step for step.

    The loss per step is the full-batch objective scaled by 1/N (mean
    convention), so the profile learning rates apply unchanged.  The
    recorded update norm is the euclidean length of the (mu_w, mu_b) move.
    """
    tasks = linreg_sequence(config.true_params, config.linreg_n,
                            seed=config.task_seed, noise_var=config.noise_var)
    result = LinregResult(steps_per_task=config.linreg_steps)
    for variant in LINREG_VARIANTS:
        q = init_mean_field((1,), 1, 1, config.sigma0,
                            make_rng(run, "linreg-init"),
                            likelihood="gaussian", noise_var=config.noise_var)
        prior = standard_prior(q)
        opt = _linreg_optimizer(variant)
        traj, norms, losses = [], [], []
        for t, task in enumerate(tasks):
            if t > 0:
                prior = q.copy()
            opt.reset(q)
            rng_noise = make_rng(run, "linreg-noise", t)
            x, y = task.train.x, task.train.y
            inv_n = 1.0 / len(x)
            for _ in range(config.linreg_steps):
                noise = make_noise_bundle(q, config.train_mc, rng_noise)
                loss, grads = elbo_and_grads(q, prior, (x, y), noise,
                                             kl_scale=1.0)
                for fam in ("mu", "v"):
                    for k in grads[fam]:
                        grads[fam][k] *= inv_n
                if not np.isfinite(loss):
                    raise NumericalError(
                        f"linreg_trajectory: diverged ({variant}, task {t})")
                updates = opt.step(q, grads)
                traj.append((float(q.mu["head0.w"][0, 0]),
                             float(q.mu["head0.b"][0])))
                norms.append(float(np.sqrt(
                    updates["mu"]["head0.w"][0, 0] ** 2
                    + updates["mu"]["head0.b"][0] ** 2)))
                losses.append(loss * inv_n)
        result.trajectories[variant] = np.asarray(traj)
        result.update_norms[variant] = np.asarray(norms)
        result.losses[variant] = np.asarray(losses)
        mses = evaluate(q, tasks, config.eval_samples,
                        make_rng(run, "linreg-eval"))
        result.avg_mse[variant] = float(np.mean(mses))
    return result


def mse_grid(config: ExperimentConfig, n_grid: int = 41, margin: float = 1.0):
    """Average test MSE over the task sequence on a (mu_w, mu_b) lattice;
    rows of (mu_w, mu_b, avg_mse) for contour rendering."""
    tasks = linreg_sequence(config.true_params, config.linreg_n,
                            seed=config.task_seed, noise_var=config.noise_var)
    ws = np.array([p[0] for p in config.true_params], dtype=np.float64)
    bs = np.array([p[1] for p in config.true_params], dtype=np.float64)
    w_axis = np.linspace(ws.min() - margin, ws.max() + margin, n_grid)
    b_axis = np.linspace(bs.min() - margin, bs.max() + margin, n_grid)
    rows = []
    for w in w_axis:
        for b in b_axis:
            errs = [float(np.mean((w * t.test.x + b - t.test.y) ** 2))
                    for t in tasks]
            rows.append((float(w), float(b), float(np.mean(errs))))
    return rows
