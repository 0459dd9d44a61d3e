"""Relaxed Categorical / Bernoulli sampling with conditional (given-outcome) draws.

All samplers accept a leading batch shape.  Categorical draws work on the
last axis of ``alpha`` logits; Bernoulli draws are elementwise on logits
``t`` with ``beta = sigmoid(t)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import _sigmoid, _softmax

U_MIN = 1e-12
U_MAX = 1.0 - 1e-12
LOGIT_CLAMP = 12.0


@dataclass
class RelaxedSample:
    """One (possibly batched) relaxed draw.

    ``q`` is the hard outcome: an int index for Categorical, a 0/1 float for
    Bernoulli.  ``u_noise`` drives ``z``; ``v_noise`` drives ``z_tilde``.
    """
    z: np.ndarray
    q: np.ndarray
    z_tilde: np.ndarray
    u_noise: np.ndarray
    v_noise: np.ndarray


def clamp_uniform(u) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=np.float64), U_MIN, U_MAX)


def gumbel(u) -> np.ndarray:
    u = clamp_uniform(u)
    return -np.log(-np.log(u))


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def probabilities(alpha) -> np.ndarray:
    return _softmax(np.asarray(alpha, dtype=np.float64))


def clamp_logits(t) -> np.ndarray:
    return np.clip(t, -LOGIT_CLAMP, LOGIT_CLAMP)


def hard_categorical(scores) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(scores, axis=-1)


def hard_bernoulli(z) -> np.ndarray:
    return (np.asarray(z) > 0.5).astype(np.float64)


# ---------------------------------------------------------------- Categorical

def relaxed_categorical(alpha, u, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z, c)`` for fixed uniform noise ``u`` shaped like ``alpha``."""
    scores = np.asarray(alpha, dtype=np.float64) + gumbel(u)
    return _softmax(scores / tau), hard_categorical(scores)


def conditional_gumbels(alpha, c, v) -> np.ndarray:
    """Gumbel-perturbed log-probabilities conditioned on ``argmax == c``.

    The chosen entry is a standard Gumbel (the maximum of ``log pi + g`` is
    Gumbel(0)); the others are Gumbels truncated below that maximum.
    """
    pi = probabilities(alpha)
    v = clamp_uniform(v)
    c = np.asarray(c)
    neg_log_v = -np.log(v)
    top = np.take_along_axis(neg_log_v, c[..., None], axis=-1)
    scores = -np.log(neg_log_v / pi + top)
    np.put_along_axis(scores, c[..., None], -np.log(top), axis=-1)
    return scores


def conditional_categorical(alpha, c, v, tau: float) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    alpha = np.broadcast_to(alpha, np.broadcast_shapes(alpha.shape, np.shape(v)))
    c = np.broadcast_to(np.asarray(c), alpha.shape[:-1])
    n = alpha.shape[-1]
    if np.any((c < 0) | (c >= n)):
        raise ValueError("categorical outcome out of range")
    return _softmax(conditional_gumbels(alpha, c, v) / tau)


def sample_relaxed_categorical(alpha, tau: float, rng: np.random.Generator,
                               size: tuple = ()) -> RelaxedSample:
    alpha = np.asarray(alpha, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be positive")
    shape = tuple(size) + alpha.shape[-1:]
    u = clamp_uniform(rng.random(shape))
    v = clamp_uniform(rng.random(shape))
    z, c = relaxed_categorical(alpha, u, tau)
    z_tilde = conditional_categorical(np.broadcast_to(alpha, shape), c, v, tau)
    return RelaxedSample(z=z, q=c, z_tilde=z_tilde, u_noise=u, v_noise=v)


# ---------------------------------------------------------------- Bernoulli

def relaxed_bernoulli(t, u, lam: float) -> np.ndarray:
    u = clamp_uniform(u)
    return _sigmoid((np.asarray(t, dtype=np.float64) + logit(u)) / lam)


def conditional_uniform(beta, b, v) -> np.ndarray:
    """Map ``v ~ U(0,1)`` into the region of ``u`` that produces outcome ``b``."""
    v = clamp_uniform(v)
    b = np.asarray(b, dtype=np.float64)
    return np.where(b > 0.5, v * beta + (1.0 - beta), v * (1.0 - beta))


def conditional_bernoulli(t, b, v, lam: float) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if np.any((b != 0.0) & (b != 1.0)):
        raise ValueError("Bernoulli outcome must be 0 or 1")
    t = np.asarray(t, dtype=np.float64)
    v_prime = clamp_uniform(conditional_uniform(_sigmoid(t), b, v))
    z_tilde = _sigmoid((t + logit(v_prime)) / lam)
    # clamping can leave a hair on the wrong side when beta is extreme
    return np.where(b > 0.5, np.maximum(z_tilde, np.nextafter(0.5, 1.0)),
                    np.minimum(z_tilde, 0.5))


def sample_relaxed_bernoulli(t, lam: float, rng: np.random.Generator,
                             size: tuple = ()) -> RelaxedSample:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    t = clamp_logits(np.asarray(t, dtype=np.float64))
    shape = np.broadcast_shapes(tuple(size), t.shape) if size else t.shape
    u = clamp_uniform(rng.random(shape))
    v = clamp_uniform(rng.random(shape))
    z = relaxed_bernoulli(t, u, lam)
    b = hard_bernoulli(z)
    return RelaxedSample(z=z, q=b, z_tilde=conditional_bernoulli(t, b, v, lam),
                         u_noise=u, v_noise=v)


def conditional_relaxed(params, q, v, temperature: float, kind: str) -> np.ndarray:
    """Dispatch helper: ``kind`` is ``"categorical"`` (params = alpha) or ``"bernoulli"`` (params = logit)."""
    if kind == "categorical":
        return conditional_categorical(params, q, v, temperature)
    if kind == "bernoulli":
        return conditional_bernoulli(params, q, v, temperature)
    raise ValueError(f"unknown distribution kind {kind!r}")


# ---------------------------------------------------------------- score functions

def categorical_score(alpha, c) -> np.ndarray:
    """d log p(c) / d alpha = onehot(c) - pi, batched over leading axes of ``c``."""
    pi = probabilities(alpha)
    c = np.asarray(c)
    out = -np.broadcast_to(pi, c.shape + pi.shape[-1:]).copy()
    np.put_along_axis(out, c[..., None],
                      np.take_along_axis(out, c[..., None], axis=-1) + 1.0, axis=-1)
    return out


def bernoulli_score(t, b) -> np.ndarray:
    """d log p(b) / d t = b - sigmoid(t)."""
    return np.asarray(b, dtype=np.float64) - _sigmoid(t)


# ---------------------------------------------------------------- reparameterisation Jacobians

def softmax_jvp_t(z, g, tau: float) -> np.ndarray:
    """Vector-Jacobian product of ``softmax(x / tau)`` evaluated at output ``z``."""
    return (z * g - z * (z * g).sum(axis=-1, keepdims=True)) / tau


def conditional_gumbel_slope(alpha, c, v) -> np.ndarray:
    """d score_i / d pi_i for the non-chosen conditional Gumbels (0 at ``c``)."""
    pi = probabilities(alpha)
    v = clamp_uniform(v)
    neg_log_v = -np.log(v)
    top = np.take_along_axis(neg_log_v, np.asarray(c)[..., None], axis=-1)
    inner = neg_log_v / pi + top
    slope = neg_log_v / (pi * pi * inner)
    np.put_along_axis(slope, np.asarray(c)[..., None], 0.0, axis=-1)
    return slope


def conditional_logit_slope(t, b, v) -> np.ndarray:
    """d logit(v') / d t for the conditional Bernoulli uniform ``v'``."""
    beta = _sigmoid(t)
    v = clamp_uniform(v)
    vp = clamp_uniform(conditional_uniform(beta, b, v))
    dvp_dbeta = np.where(np.asarray(b) > 0.5, v - 1.0, -v)
    return dvp_dbeta * beta * (1.0 - beta) / (vp * (1.0 - vp))
