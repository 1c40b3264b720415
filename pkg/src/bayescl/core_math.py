"""Numerical primitives shared by every module.

Conventions, fixed repo-wide:

* all arrays are C-order float64 ("Tensor2" = 2-D ndarray);
* the only PRNG is numpy's PCG64 behind ``numpy.random.Generator``;
* component streams are derived by hashing ``(run_seed, *labels)`` so that
  adding a consumer never perturbs another consumer's draw sequence;
* softmax-family code must go through :func:`logsumexp` (max-subtraction),
  never a bare ``exp``.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "NumericalError",
    "derive_seed",
    "make_rng",
    "gaussian_sample",
    "logsumexp",
    "log_softmax",
    "finite_diff_grad",
]


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values it cannot recover
    from (diverged loss, overflowing variances).  The CLI maps this to its
    own exit code, distinct from config or data errors."""


def derive_seed(run_seed: int, *labels) -> int:
    """Derive a stable 64-bit sub-seed from a run seed plus string labels.

    SHA-256 over the joined text, truncated to 8 bytes.  Independent of
    platform, process, and the set of other derived seeds.
    """
    text = "|".join([str(int(run_seed))] + [str(lab) for lab in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def make_rng(run_seed: int, *labels) -> np.random.Generator:
    """PCG64 generator for one component.

    With no labels the run seed is used directly; with labels the stream is
    the hashed sub-seed from :func:`derive_seed`.
    """
    if labels:
        return np.random.default_rng(derive_seed(run_seed, *labels))
    return np.random.default_rng(int(run_seed))


def gaussian_sample(mu, sigma, rng: np.random.Generator):
    """Draw ``mu + sigma * eps`` with ``eps ~ N(0, 1)`` from ``rng``.

    Scalar or array ``mu``/``sigma`` (broadcast).  ``sigma`` must be
    non-negative and ``mu`` finite.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not np.all(np.isfinite(mu)):
        raise ValueError("gaussian_sample: mu must be finite")
    if not np.all(sigma >= 0.0):
        raise ValueError("gaussian_sample: sigma must be >= 0")
    eps = rng.standard_normal(np.broadcast(mu, sigma).shape)
    out = mu + sigma * eps
    if out.shape == ():
        return float(out)
    return out


def logsumexp(a, axis=-1):
    """log(sum(exp(a))) along ``axis``, stabilized by max subtraction."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("logsumexp: empty input")
    amax = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return np.squeeze(out, axis=axis)


def log_softmax(logits, axis=-1):
    """logits - logsumexp(logits); rows exponentiate to a unit simplex."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("log_softmax: empty input")
    if not np.all(np.isfinite(logits)):
        raise ValueError("log_softmax: logits must be finite")
    return logits - np.expand_dims(logsumexp(logits, axis=axis), axis)


def finite_diff_grad(f, x, h: float = 1e-5):
    """Central-difference gradient of a scalar function at ``x``.

    The test oracle for every analytic gradient in the repo: it must stay a
    plain two-sided difference, independent of any backprop code path.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be > 0")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("finite_diff_grad: non-finite function value")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
