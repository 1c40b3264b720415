"""Mean-field Gaussian networks with analytic reparameterized gradients.

A network is a flat dict of parameter tensors keyed ``trunk{i}.w`` /
``trunk{i}.b`` for the shared ReLU stack and ``head{h}.w`` / ``head{h}.b``
for task heads.  The variational family is a fully factorized Gaussian: one
mean ``mu`` and one log standard deviation ``v`` per scalar parameter, so a
weight draw is ``theta = mu + exp(v) * eps`` with ``eps ~ N(0, I)``.

All gradients here are exact hand derivatives (reparameterization trick plus
plain MLP backprop); nothing in this module or its callers relies on an
autodiff framework.  The scalar being differentiated is always

    loss = -(1/S) * sum_s loglik(batch; theta_s) + kl_scale * KL(q || prior)

with one shared ``eps`` dict per Monte Carlo sample ``s`` across the whole
batch.  The chain rule through the draw gives ``dtheta/dmu = 1`` and
``dtheta/dv = exp(v) * eps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import log_softmax

__all__ = [
    "MeanField",
    "init_mean_field",
    "standard_prior",
    "add_head",
    "make_noise",
    "make_noise_bundle",
    "forward",
    "categorical_loglik",
    "gaussian_loglik",
    "kl_diag_gauss",
    "elbo_and_grads",
    "input_grad",
    "predict",
    "flatten_params",
    "set_flat_params",
]

INIT_MU_STD = 0.1


@dataclass
class MeanField:
    """Factorized Gaussian over network parameters.

    ``trunk_widths`` is ``(d_in, h1, ..., hk)``; every head maps the last
    trunk activation to ``head_width`` outputs.  ``likelihood`` selects the
    observation model: ``"categorical"`` (softmax over head outputs) or
    ``"gaussian"`` (head outputs are means, fixed variance ``noise_var``).
    """

    mu: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    trunk_widths: tuple = (1,)
    head_width: int = 1
    likelihood: str = "categorical"
    noise_var: float = 1.0

    @property
    def n_trunk_layers(self) -> int:
        return len(self.trunk_widths) - 1

    @property
    def n_heads(self) -> int:
        return sum(1 for k in self.mu if k.startswith("head") and k.endswith(".w"))

    def keys(self):
        return sorted(self.mu)

    def head_keys(self, head: int):
        return [f"head{head}.w", f"head{head}.b"]

    def trunk_keys(self):
        return [k for k in self.keys() if k.startswith("trunk")]

    def sigma(self, key: str):
        return np.exp(self.v[key])

    def copy(self) -> "MeanField":
        return MeanField(
            mu={k: a.copy() for k, a in self.mu.items()},
            v={k: a.copy() for k, a in self.v.items()},
            trunk_widths=self.trunk_widths,
            head_width=self.head_width,
            likelihood=self.likelihood,
            noise_var=self.noise_var,
        )


def _init_pair(shape, sigma0, rng):
    mu = rng.normal(0.0, INIT_MU_STD, size=shape)
    v = np.full(shape, np.log(sigma0), dtype=np.float64)
    return mu, v


def init_mean_field(trunk_widths, head_width, n_heads, sigma0, rng,
                    likelihood="categorical", noise_var=1.0) -> MeanField:
    """Fresh posterior: mu ~ N(0, 0.1^2), sigma = sigma0 everywhere."""
    if sigma0 <= 0:
        raise ValueError("init_mean_field: sigma0 must be > 0")
    if n_heads < 1:
        raise ValueError("init_mean_field: need at least one head")
    q = MeanField(trunk_widths=tuple(trunk_widths), head_width=int(head_width),
                  likelihood=likelihood, noise_var=float(noise_var))
    for i in range(q.n_trunk_layers):
        d_in, d_out = trunk_widths[i], trunk_widths[i + 1]
        q.mu[f"trunk{i}.w"], q.v[f"trunk{i}.w"] = _init_pair((d_in, d_out), sigma0, rng)
        q.mu[f"trunk{i}.b"], q.v[f"trunk{i}.b"] = _init_pair((d_out,), sigma0, rng)
    for h in range(n_heads):
        _grow_head(q, h, sigma0, rng)
    return q


def _grow_head(q: MeanField, h: int, sigma0, rng):
    d_in = q.trunk_widths[-1]
    q.mu[f"head{h}.w"], q.v[f"head{h}.w"] = _init_pair((d_in, q.head_width), sigma0, rng)
    q.mu[f"head{h}.b"], q.v[f"head{h}.b"] = _init_pair((q.head_width,), sigma0, rng)


def add_head(q: MeanField, sigma0, rng) -> int:
    """Append a freshly initialized head to the posterior; returns its index."""
    h = q.n_heads
    _grow_head(q, h, sigma0, rng)
    return h


def standard_prior(q: MeanField) -> MeanField:
    """N(0, 1) prior with the same key structure as ``q`` (v = log 1 = 0)."""
    return MeanField(
        mu={k: np.zeros_like(a) for k, a in q.mu.items()},
        v={k: np.zeros_like(a) for k, a in q.v.items()},
        trunk_widths=q.trunk_widths,
        head_width=q.head_width,
        likelihood=q.likelihood,
        noise_var=q.noise_var,
    )


def make_noise(q: MeanField, rng, heads=None) -> dict:
    """One eps dict (standard normal per parameter) in sorted key order.

    ``heads`` restricts which head blocks get draws; trunk keys are always
    included.  Sorted iteration keeps the draw sequence independent of dict
    insertion history.
    """
    keep = None
    if heads is not None:
        keep = set()
        for h in heads:
            keep.update(q.head_keys(h))
    eps = {}
    for k in q.keys():
        if k.startswith("head") and keep is not None and k not in keep:
            continue
        eps[k] = rng.standard_normal(q.mu[k].shape)
    return eps


def make_noise_bundle(q: MeanField, n: int, rng, heads=None) -> list:
    if n < 1:
        raise ValueError("make_noise_bundle: need n >= 1")
    return [make_noise(q, rng, heads=heads) for _ in range(n)]


def _sample_theta(q: MeanField, eps: dict) -> dict:
    return {k: q.mu[k] + np.exp(q.v[k]) * e for k, e in eps.items()}


def _forward_theta(theta: dict, x, n_trunk: int, head: int):
    a = x
    layer_cache = []
    for i in range(n_trunk):
        z = a @ theta[f"trunk{i}.w"] + theta[f"trunk{i}.b"]
        layer_cache.append((a, z))
        a = np.maximum(z, 0.0)
    out = a @ theta[f"head{head}.w"] + theta[f"head{head}.b"]
    return out, (layer_cache, a)


def _backprop_theta(theta: dict, cache, dout, head: int):
    """Grads of a scalar with upstream dL/dout, plus dL/dx."""
    layer_cache, a_last = cache
    g = {}
    g[f"head{head}.w"] = a_last.T @ dout
    g[f"head{head}.b"] = dout.sum(axis=0)
    da = dout @ theta[f"head{head}.w"].T
    for i in reversed(range(len(layer_cache))):
        a_in, z = layer_cache[i]
        dz = da * (z > 0.0)
        g[f"trunk{i}.w"] = a_in.T @ dz
        g[f"trunk{i}.b"] = dz.sum(axis=0)
        da = dz @ theta[f"trunk{i}.w"].T
    return g, da


def forward(q: MeanField, x, noise: dict, head: int = 0):
    """One stochastic forward pass with the given eps dict."""
    x = np.asarray(x, dtype=np.float64)
    theta = _sample_theta(q, noise)
    out, _ = _forward_theta(theta, x, q.n_trunk_layers, head)
    return out


def categorical_loglik(logits, y) -> float:
    """sum_n log softmax(logits_n)[y_n]."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    if logits.shape[0] != y.shape[0]:
        raise ValueError("categorical_loglik: batch size mismatch")
    if logits.shape[0] == 0:
        return 0.0
    if np.any(y < 0) or np.any(y >= logits.shape[1]):
        raise ValueError("categorical_loglik: label out of range")
    ls = log_softmax(logits, axis=-1)
    return float(ls[np.arange(len(y)), y].sum())


def gaussian_loglik(pred, y, noise_var: float) -> float:
    """sum over batch and dims of N(y; pred, noise_var) log density."""
    if noise_var <= 0:
        raise ValueError("gaussian_loglik: noise_var must be > 0")
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(pred.shape)
    if pred.shape[0] == 0:
        return 0.0
    quad = np.sum((y - pred) ** 2) / (2.0 * noise_var)
    return float(-0.5 * pred.size * np.log(2.0 * np.pi * noise_var) - quad)


def _loglik_and_dout(q: MeanField, out, y):
    """Log-likelihood of the batch plus d(-loglik)/dout."""
    if q.likelihood == "categorical":
        ll = categorical_loglik(out, y)
        p = np.exp(log_softmax(out, axis=-1))
        onehot = np.zeros_like(p)
        onehot[np.arange(len(y)), np.asarray(y)] = 1.0
        return ll, p - onehot
    if q.likelihood == "gaussian":
        yv = np.asarray(y, dtype=np.float64).reshape(out.shape)
        ll = gaussian_loglik(out, yv, q.noise_var)
        return ll, (out - yv) / q.noise_var
    raise ValueError(f"unknown likelihood {q.likelihood!r}")


def kl_diag_gauss(q: MeanField, p: MeanField) -> float:
    """KL(q || p) for factorized Gaussians, summed over all parameters.

    Per scalar:  (vp - vq) + (exp(2 vq) + (mq - mp)^2) * exp(-2 vp) / 2 - 1/2.
    """
    kl = 0.0
    for k in q.mu:
        if k not in p.mu:
            raise KeyError(f"kl_diag_gauss: prior missing key {k!r}")
        mq, vq = q.mu[k], q.v[k]
        mp, vp = p.mu[k], p.v[k]
        inv_var_p = np.exp(-2.0 * vp)
        kl += float(np.sum(
            (vp - vq) + 0.5 * (np.exp(2.0 * vq) + (mq - mp) ** 2) * inv_var_p - 0.5
        ))
    return kl


def _kl_grads(q: MeanField, p: MeanField):
    g_mu, g_v = {}, {}
    for k in q.mu:
        mq, vq = q.mu[k], q.v[k]
        mp, vp = p.mu[k], p.v[k]
        inv_var_p = np.exp(-2.0 * vp)
        g_mu[k] = (mq - mp) * inv_var_p
        g_v[k] = np.exp(2.0 * vq) * inv_var_p - 1.0
    return g_mu, g_v


def elbo_and_grads(q: MeanField, prior: MeanField, batch, noise, kl_scale: float,
                   head: int = 0):
    """Negative-ELBO style loss with exact grads w.r.t. every mu and v.

        loss = -(1/S) sum_s loglik(batch; theta_s) + kl_scale * KL(q || prior)

    ``noise`` is the list of eps dicts defining the S Monte Carlo draws; the
    same list reproduces the same loss bit for bit.  Returns
    ``(loss, {"mu": {...}, "v": {...}})`` with grads over all keys of ``q``
    (data grads land only on trunk + the active head; KL grads on all).
    """
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    if not noise:
        raise ValueError("elbo_and_grads: need at least one noise sample")
    n_mc = len(noise)

    g_mu = {k: np.zeros_like(a) for k, a in q.mu.items()}
    g_v = {k: np.zeros_like(a) for k, a in q.v.items()}
    total_ll = 0.0
    if x.shape[0] > 0:
        for eps in noise:
            theta = _sample_theta(q, eps)
            out, cache = _forward_theta(theta, x, q.n_trunk_layers, head)
            ll, dout = _loglik_and_dout(q, out, y)
            total_ll += ll
            g_theta, _ = _backprop_theta(theta, cache, dout, head)
            for k, g in g_theta.items():
                g_mu[k] += g
                g_v[k] += g * np.exp(q.v[k]) * eps[k]
    data_loss = -total_ll / n_mc
    inv = 1.0 / n_mc
    for k in g_mu:
        g_mu[k] *= inv
        g_v[k] *= inv

    kl = kl_diag_gauss(q, prior)
    if kl_scale != 0.0:
        kg_mu, kg_v = _kl_grads(q, prior)
        for k in g_mu:
            g_mu[k] += kl_scale * kg_mu[k]
            g_v[k] += kl_scale * kg_v[k]
    loss = data_loss + kl_scale * kl
    return loss, {"mu": g_mu, "v": g_v}


def data_term_grads(q: MeanField, batch, noise, head: int = 0):
    """Grads of -(1/S) sum_s loglik(batch) alone (no KL); used by the
    regret term, which adds replayed-coreset likelihood to a live loss."""
    zero_prior = q  # KL(q||q) = 0 and kl_scale 0 skips its grads entirely
    return elbo_and_grads(q, zero_prior, batch, noise, kl_scale=0.0, head=head)


def input_grad(q: MeanField, x, y, noise, head: int = 0):
    """d/dx of the Monte Carlo log-likelihood (1/S) sum_s loglik.

    Ascent direction in input space (positive toward higher likelihood);
    one row per sample in ``x``.  Labels are fixed, so this is the score of
    the class-conditional fit used to steer synthetic coreset points.
    """
    x = np.asarray(x, dtype=np.float64)
    if not noise:
        raise ValueError("input_grad: need at least one noise sample")
    acc = np.zeros_like(x)
    for eps in noise:
        theta = _sample_theta(q, eps)
        out, cache = _forward_theta(theta, x, q.n_trunk_layers, head)
        _, dout = _loglik_and_dout(q, out, y)
        _, dx = _backprop_theta(theta, cache, dout, head)
        acc -= dx  # dout is d(-loglik)/dout; flip to ascent
    return acc / len(noise)


def predict(q: MeanField, x, n_samples: int, rng, head: int = 0):
    """Monte Carlo predictive: mean softmax probabilities (categorical) or
    mean of the head outputs (gaussian)."""
    if n_samples < 1:
        raise ValueError("predict: need n_samples >= 1")
    x = np.asarray(x, dtype=np.float64)
    acc = None
    for _ in range(n_samples):
        eps = make_noise(q, rng, heads=[head])
        out = forward(q, x, eps, head=head)
        val = np.exp(log_softmax(out, axis=-1)) if q.likelihood == "categorical" else out
        acc = val if acc is None else acc + val
    return acc / n_samples


def flatten_params(q: MeanField):
    """All mu then all v, sorted keys, raveled; pairs with set_flat_params."""
    parts = [q.mu[k].ravel() for k in q.keys()]
    parts += [q.v[k].ravel() for k in q.keys()]
    return np.concatenate(parts)


def set_flat_params(q: MeanField, vec):
    vec = np.asarray(vec, dtype=np.float64)
    i = 0
    for store in (q.mu, q.v):
        for k in q.keys():
            n = store[k].size
            store[k][...] = vec[i:i + n].reshape(store[k].shape)
            i += n
    if i != vec.size:
        raise ValueError("set_flat_params: size mismatch")
