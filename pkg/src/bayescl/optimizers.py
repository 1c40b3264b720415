"""First-order optimizers and the Gaussian natural-gradient transform.

For a factorized Gaussian with parameters (mu, v = log sigma), the Fisher
information is diagonal: 1/sigma^2 in each mu coordinate and the constant 2
in each v coordinate.  Preconditioning a Euclidean gradient by the inverse
Fisher therefore means

    g_hat_mu = sigma^2 * g_mu          g_hat_v = g_v / 2

which is what :func:`gng_transform` applies.  Composition order is fixed:
the transform runs first and the base optimizer consumes the transformed
gradients, so Adam's moment estimates accumulate g_hat, not g.

Updates returned by every step function are the actual deltas added to the
parameters (new - old), which is what the step log records.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "gng_transform",
    "sgd_step",
    "AdamState",
    "init_adam",
    "adam_step",
    "SGD",
    "Adam",
    "compose",
    "StepLog",
    "moment_diagnostics",
]


def _zero_like_grads(q):
    return {
        "mu": {k: np.zeros_like(a) for k, a in q.mu.items()},
        "v": {k: np.zeros_like(a) for k, a in q.v.items()},
    }


def gng_transform(grads, q):
    """Inverse-Fisher scaling of a (mu, v) gradient pair.

    Uses the current posterior's sigma^2 = exp(2 v); does not mutate the
    input grads.
    """
    out_mu = {k: np.exp(2.0 * q.v[k]) * g for k, g in grads["mu"].items()}
    out_v = {k: 0.5 * g for k, g in grads["v"].items()}
    return {"mu": out_mu, "v": out_v}


def sgd_step(q, grads, lr: float):
    """Plain gradient descent; mutates q, returns the applied deltas."""
    if lr <= 0:
        raise ValueError("sgd_step: lr must be > 0")
    updates = {"mu": {}, "v": {}}
    for fam, store in (("mu", q.mu), ("v", q.v)):
        for k, g in grads[fam].items():
            d = -lr * g
            store[k] += d
            updates[fam][k] = d
    return updates


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m1: dict = field(default_factory=dict)
    m2: dict = field(default_factory=dict)


def init_adam(q, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    if lr <= 0 or not (0.0 <= beta1 < 1.0) or not (0.0 <= beta2 < 1.0) or eps <= 0:
        raise ValueError("init_adam: bad hyperparameters")
    st = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    st.m1 = _zero_like_grads(q)
    st.m2 = _zero_like_grads(q)
    return st


def adam_step(state: AdamState, q, grads):
    """Bias-corrected Adam; mutates q and state, returns the applied deltas.

    A coordinate whose gradient has been identically zero since init keeps
    zero moments and receives an exactly zero update, which is how frozen
    heads stay untouched.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    updates = {"mu": {}, "v": {}}
    for fam, store in (("mu", q.mu), ("v", q.v)):
        for k, g in grads[fam].items():
            m1 = state.m1[fam][k]
            m2 = state.m2[fam][k]
            m1 *= b1
            m1 += (1.0 - b1) * g
            m2 *= b2
            m2 += (1.0 - b2) * g * g
            d = -state.lr * (m1 / c1) / (np.sqrt(m2 / c2) + state.eps)
            store[k] += d
            updates[fam][k] = d
    return updates


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def reset(self, q):
        pass

    def step(self, q, grads):
        return sgd_step(q, grads, self.lr)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.state = None

    def reset(self, q):
        self.state = init_adam(q, **self.hyper)

    def step(self, q, grads):
        if self.state is None:
            self.reset(q)
        return adam_step(self.state, q, grads)


class _Composed:
    def __init__(self, transform, base):
        self.transform = transform
        self.base = base

    def reset(self, q):
        self.base.reset(q)

    def step(self, q, grads):
        return self.base.step(q, self.transform(grads, q))


def compose(transform, base):
    """Optimizer that feeds ``transform(grads, q)`` into ``base.step``."""
    return _Composed(transform, base)


class StepLog:
    """Per-step trace of selected scalar coordinates.

    ``tracked`` is a list of (key, flat_index) pairs into the mu store; each
    recorded row keeps the coordinate's sigma^2, raw mu-gradient, transformed
    mu-gradient and applied update.  Rows serialize to CSV with columns
    step, param_id, sigma_sq, g_mu, g_hat_mu, update.
    """

    COLUMNS = ("step", "param_id", "sigma_sq", "g_mu", "g_hat_mu", "update")

    def __init__(self, tracked):
        self.tracked = [(k, int(i)) for k, i in tracked]
        self.rows = []

    def sigma_snapshot(self, q):
        """Capture sigma^2 of the tracked coordinates BEFORE the optimizer
        step; the step mutates v, and the identity checks need the variance
        the transform actually used."""
        return {k: np.exp(2.0 * q.v[k]).ravel().copy() for k, _ in self.tracked}

    def record(self, step, sigma_sq, grads, transformed, updates):
        for key, idx in self.tracked:
            self.rows.append((
                int(step),
                f"{key}[{idx}]",
                float(sigma_sq[key][idx]),
                float(grads["mu"][key].ravel()[idx]),
                float(transformed["mu"][key].ravel()[idx]),
                float(updates["mu"][key].ravel()[idx]),
            ))

    def series(self, param_id: str):
        cols = {c: [] for c in self.COLUMNS if c != "param_id"}
        for row in self.rows:
            if row[1] != param_id:
                continue
            cols["step"].append(row[0])
            cols["sigma_sq"].append(row[2])
            cols["g_mu"].append(row[3])
            cols["g_hat_mu"].append(row[4])
            cols["update"].append(row[5])
        return {c: np.asarray(vals) for c, vals in cols.items()}

    def param_ids(self):
        return sorted({row[1] for row in self.rows})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            w.writerows(self.rows)


def moment_diagnostics(log: StepLog):
    """First and second moment identities of the transformed gradient.

    Over the logged steps of each coordinate, with population moments,

        E[g_hat]   = E[s] E[g] + cov(s, g)                    (s = sigma^2)
        E[g_hat^2] = (E[s]^2 + var(s)) E[g^2] + cov(s^2, g^2)

    both hold identically when g_hat = s * g; the report carries each side
    plus the residual so a run can assert they agree to float precision.
    """
    out = {}
    for pid in log.param_ids():
        s = log.series(pid)
        sig, g, ghat = s["sigma_sq"], s["g_mu"], s["g_hat_mu"]
        n = len(g)
        if n == 0:
            continue
        cov_sg = np.mean(sig * g) - np.mean(sig) * np.mean(g)
        lhs1 = np.mean(ghat)
        rhs1 = np.mean(sig) * np.mean(g) + cov_sg
        cov_s2g2 = np.mean(sig**2 * g**2) - np.mean(sig**2) * np.mean(g**2)
        lhs2 = np.mean(ghat**2)
        rhs2 = (np.mean(sig) ** 2 + np.var(sig)) * np.mean(g**2) + cov_s2g2
        out[pid] = {
            "mean_lhs": lhs1, "mean_rhs": rhs1, "mean_resid": abs(lhs1 - rhs1),
            "sq_lhs": lhs2, "sq_rhs": rhs2, "sq_resid": abs(lhs2 - rhs2),
        }
    return out
