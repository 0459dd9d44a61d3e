"""Gradient estimators for E_{c,b}[loss(c, b)] w.r.t. (alpha, beta logits).

* score function (REINFORCE)
* Gumbel-Softmax straight-through
* RELAX with a learned tanh surrogate as control variate
* exact enumeration for small spaces (test oracle)

Every estimator works on a batch of B independent draws and returns the
batch mean, with per-draw values kept in ``diagnostics`` for Monte Carlo
checks.

RELAX surrogate input: the relaxed sub-policy simplex ``z_c`` (N) followed by
k relaxed apply-bits.  Bit j is the ``z_c``-weighted mixture over sub-policies
of ``sigmoid((t[s, j] + logit u_j) / lam)`` with one shared uniform ``u_j``.
When ``z_c`` is one-hot this is exactly the chosen sub-policy's relaxed bit;
the mixture keeps the input continuous in alpha, which the pathwise terms
need for the estimator to stay unbiased once the betas differ across
sub-policies.  The price is that the control-variate terms reach every beta
logit, not only the sampled ones; those contributions are zero-mean.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import distributions as D
from .policy import PolicyParams, SampledPolicy

MAX_ENUMERATION = 4096


@dataclass
class GradEstimate:
    d_alpha: np.ndarray
    d_beta: np.ndarray
    d_m: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    objective: ad.Tensor | None = None

    def arrays(self) -> list[np.ndarray]:
        return [self.d_alpha, self.d_beta, self.d_m]

    def combine(self, other: "GradEstimate", scale: float) -> "GradEstimate":
        """``scale * (self - other)``; used for the finite-difference hypergradient."""
        return GradEstimate(scale * (self.d_alpha - other.d_alpha),
                            scale * (self.d_beta - other.d_beta),
                            scale * (self.d_m - other.d_m))


class Surrogate:
    """Two-layer tanh network ``c(z) = tanh(z W1 + b1) . w2 + b2``."""

    def __init__(self, params: list[ad.Tensor]):
        self.params = params

    @classmethod
    def create(cls, n_in: int, hidden: int = 100, rng: np.random.Generator | None = None,
               scale: float = 1.0) -> "Surrogate":
        rng = rng if rng is not None else np.random.default_rng(0)
        w1 = rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, hidden))
        w2 = rng.normal(0.0, scale / np.sqrt(hidden), size=hidden)
        return cls([ad.Tensor(w1, True), ad.Tensor(np.zeros(hidden), True),
                    ad.Tensor(w2, True), ad.Tensor(0.0, True)])

    @classmethod
    def zeros(cls, n_in: int, hidden: int = 100) -> "Surrogate":
        return cls([ad.Tensor(np.zeros((n_in, hidden)), True), ad.Tensor(np.zeros(hidden), True),
                    ad.Tensor(np.zeros(hidden), True), ad.Tensor(0.0, True)])

    @property
    def n_in(self) -> int:
        return self.params[0].shape[0]

    def __call__(self, z) -> ad.Tensor:
        return ad.mlp_forward(self.params, z)

    def input_gradient(self, z) -> ad.Tensor:
        return ad.mlp_input_gradient(self.params, z)


def _mean_over_draws(per_alpha: np.ndarray, per_beta: np.ndarray, n: int, k: int,
                     name: str, d_m: np.ndarray | None = None, **diag) -> GradEstimate:
    d_m = np.zeros((n, k)) if d_m is None else d_m
    return GradEstimate(per_alpha.mean(axis=0), per_beta.mean(axis=0), d_m,
                        {"estimator": name, "samples": len(per_alpha),
                         "alpha_samples": per_alpha, "beta_samples": per_beta, **diag})


def _scatter_chosen(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Place per-draw (B, k) values at row ``index[b]`` of a (B, N, k) zero array."""
    out = np.zeros((len(index), n, values.shape[1]))
    out[np.arange(len(index)), index] = values
    return out


class LinearSurrogate:
    """``c(z) = z . a + b``; its input gradient is ``a`` for every z."""

    def __init__(self, params: list[ad.Tensor]):
        self.params = params

    @classmethod
    def zeros(cls, n_in: int) -> "LinearSurrogate":
        return cls([ad.Tensor(np.zeros(n_in), True), ad.Tensor(0.0, True)])

    @property
    def n_in(self) -> int:
        return self.params[0].shape[0]

    def __call__(self, z) -> ad.Tensor:
        return ad.matmul(ad.as_tensor(z), self.params[0]) + self.params[1]

    def input_gradient(self, z) -> ad.Tensor:
        z = ad.as_tensor(z)
        if z.ndim == 1:
            return self.params[0] * 1.0
        return ad.broadcast_to(self.params[0], z.shape)


# ---------------------------------------------------------------- score function

def score_grad(losses, sample: SampledPolicy, params: PolicyParams) -> GradEstimate:
    losses = np.asarray(losses, dtype=np.float64)
    n, k = params.beta_logits.shape
    idx = sample.subpolicy_index
    s_alpha = D.categorical_score(params.alpha, idx)
    s_beta = _scatter_chosen(idx, D.bernoulli_score(params.beta_logits[idx], sample.bits), n)
    return _mean_over_draws(losses[:, None] * s_alpha, losses[:, None, None] * s_beta, n, k,
                            "score", losses=losses)


# ---------------------------------------------------------------- Gumbel straight-through

def gumbel_st_grad(dl_dh, dl_db, sample: SampledPolicy, params: PolicyParams,
                   tau: float | None = None, lam: float | None = None) -> GradEstimate:
    """Straight-through gradients from per-draw loss sensitivities.

    ``dl_dh[b]`` is d loss / d (weight of the chosen sub-policy) and
    ``dl_db[b, j]`` is d loss / d (apply-bit j); the forward pass used the hard
    draw, the backward pass goes through the relaxed samples.
    """
    tau = sample.tau if tau is None else tau
    lam = sample.lam if lam is None else lam
    n, k = params.beta_logits.shape
    idx = sample.subpolicy_index
    b_count = len(idx)
    g = np.zeros((b_count, n))
    g[np.arange(b_count), idx] = np.asarray(dl_dh, dtype=np.float64)
    per_alpha = D.softmax_jvp_t(sample.categorical.z, g, tau)
    zb = sample.bernoulli.z
    per_bits = np.asarray(dl_db, dtype=np.float64).reshape(b_count, k) * zb * (1.0 - zb) / lam
    return _mean_over_draws(per_alpha, _scatter_chosen(idx, per_bits, n), n, k, "gumbel_st")


# ---------------------------------------------------------------- RELAX

@dataclass
class _RelaxInputs:
    z: np.ndarray            # (B, N + k) surrogate input at the free relaxed draw
    z_tilde: np.ndarray      # (B, N + k) surrogate input at the conditional draw
    mix: np.ndarray          # (B, N, k) per-sub-policy relaxed bits, free draw
    mix_tilde: np.ndarray    # (B, N, k) per-sub-policy relaxed bits, conditional draw
    dbits_dt: np.ndarray     # (B, N, k) d(mixed bit j)/d t[s, j], free draw
    dbits_tilde_dt: np.ndarray
    cond_alpha_slope: np.ndarray  # (B, N) d score_i / d pi_i times pi_i


def relax_inputs(sample: SampledPolicy, params: PolicyParams) -> _RelaxInputs:
    tau, lam = sample.tau, sample.lam
    t = D.clamp_logits(params.beta_logits)
    idx = sample.subpolicy_index
    b_count = len(idx)
    rows = np.arange(b_count)
    zc, zc_t = sample.categorical.z, sample.categorical.z_tilde
    u, v, bits = sample.bernoulli.u_noise, sample.bernoulli.v_noise, sample.bits

    y = D.relaxed_bernoulli(t[None], u[:, None, :], lam)
    vp = D.clamp_uniform(D.conditional_uniform(D._sigmoid(t[idx]), bits, v))
    y_t = D._sigmoid((t[None] + D.logit(vp)[:, None, :]) / lam)

    z = np.concatenate([zc, np.einsum("bn,bnk->bk", zc, y)], axis=1)
    z_t = np.concatenate([zc_t, np.einsum("bn,bnk->bk", zc_t, y_t)], axis=1)

    dy = y * (1.0 - y) / lam
    dy_t = y_t * (1.0 - y_t) / lam
    dbits_dt = zc[:, :, None] * dy
    dbits_tilde_dt = zc_t[:, :, None] * dy_t
    # v' depends on the chosen sub-policy's beta, which moves every mixed bit
    kappa = D.conditional_logit_slope(t[idx], bits, v)
    dbits_tilde_dt[rows, idx] += kappa * np.einsum("bnk->bk", dbits_tilde_dt)

    slope = D.conditional_gumbel_slope(params.alpha, idx, sample.categorical.v_noise)
    return _RelaxInputs(z, z_t, y, y_t, dbits_dt, dbits_tilde_dt, slope * params.pi[None, :])


def _pathwise(grad_in: ad.Tensor, zc: np.ndarray, mix: np.ndarray, dbits_dt: np.ndarray,
              tau: float, n: int, k: int) -> tuple[ad.Tensor, ad.Tensor]:
    """Chain the surrogate input gradient back to d/d(softmax input) and d/dt."""
    b_count = zc.shape[0]
    g_cat = ad.index_select(grad_in, np.arange(n), axis=1)
    g_bits = ad.index_select(grad_in, np.arange(n, n + k), axis=1)
    g_bits_b = ad.broadcast_to(ad.reshape(g_bits, (b_count, 1, k)), (b_count, n, k))
    g_simplex = g_cat + ad.sum(g_bits_b * mix, axis=2)
    inner = ad.sum(g_simplex * zc, axis=1, keepdims=True)
    d_scores = (g_simplex * zc - ad.broadcast_to(inner, (b_count, n)) * zc) * (1.0 / tau)
    return d_scores, g_bits_b * dbits_dt


def relax_grad(losses, sample: SampledPolicy, params: PolicyParams, surrogate: Surrogate,
               tau: float | None = None) -> GradEstimate:
    """Per draw: ``[L(q) - c(z~)] dlog p(q) + dc(z) - dc(z~)``, averaged over draws.

    The returned estimate carries ``objective`` = squared norm of the batch
    estimate as a function of the surrogate parameters (the single-sample
    variance proxy minimised by :func:`update_surrogate`).
    """
    if tau is not None:
        sample.tau = tau
    tau = sample.tau
    losses = np.asarray(losses, dtype=np.float64)
    n, k = params.beta_logits.shape
    if surrogate.n_in != n + k:
        raise ValueError(f"surrogate expects {surrogate.n_in} inputs, space needs {n + k}")
    b_count = len(losses)
    idx = sample.subpolicy_index
    inp = relax_inputs(sample, params)

    c_tilde = surrogate(inp.z_tilde)
    if not np.all(np.isfinite(c_tilde.data)):
        raise ad.NonFiniteError("surrogate output is not finite")
    da_z, dt_z = _pathwise(surrogate.input_gradient(inp.z), sample.categorical.z, inp.mix,
                           inp.dbits_dt, tau, n, k)
    da_zt, dt_zt = _pathwise(surrogate.input_gradient(inp.z_tilde), sample.categorical.z_tilde,
                             inp.mix_tilde, inp.dbits_tilde_dt, tau, n, k)
    # conditional Gumbels move with pi for the non-chosen entries
    r = da_zt * inp.cond_alpha_slope
    da_zt = r - ad.broadcast_to(ad.sum(r, axis=1, keepdims=True), (b_count, n)) * params.pi

    s_alpha = D.categorical_score(params.alpha, idx)
    s_beta = _scatter_chosen(idx, D.bernoulli_score(params.beta_logits[idx], sample.bits), n)
    resid = ad.reshape(losses - c_tilde, (b_count, 1))
    est_alpha = ad.broadcast_to(resid, (b_count, n)) * s_alpha + da_z - da_zt
    est_beta = (ad.broadcast_to(ad.reshape(resid, (b_count, 1, 1)), (b_count, n, k)) * s_beta
                + dt_z - dt_zt)
    mean_alpha = ad.mean(est_alpha, axis=0)
    mean_beta = ad.mean(est_beta, axis=0)
    objective = ad.sum(ad.square(mean_alpha)) + ad.sum(ad.square(mean_beta))
    out = _mean_over_draws(est_alpha.data, est_beta.data, n, k, "relax", losses=losses,
                           surrogate_tilde=c_tilde.data)
    out.objective = objective
    return out


def update_surrogate(estimate: GradEstimate, surrogate: Surrogate, optimizer) -> np.ndarray:
    """One optimiser step on the surrogate, minimising the squared estimate."""
    if estimate.objective is None:
        raise ValueError("estimate has no recorded objective (not a RELAX estimate?)")
    grads = ad.grad(estimate.objective, surrogate.params)
    optimizer.step(grads)
    return grads


# ---------------------------------------------------------------- exact enumeration

def outcome_probabilities(params: PolicyParams) -> tuple[list[tuple[int, tuple[int, ...]]], np.ndarray]:
    n, k = params.beta_logits.shape
    pi = params.pi
    beta = params.beta
    outcomes, probs = [], []
    for c in range(n):
        for bits in itertools.product((0, 1), repeat=k):
            b = np.array(bits)
            outcomes.append((c, bits))
            probs.append(pi[c] * np.prod(np.where(b == 1, beta[c], 1.0 - beta[c])))
    return outcomes, np.array(probs)


def enumerate_exact_grad(params: PolicyParams, loss_fn: Callable[[int, tuple], float]) -> GradEstimate:
    """Exact gradient of sum_{c,b} p(c, b) loss(c, b) by full enumeration."""
    n, k = params.beta_logits.shape
    if n * 2**k > MAX_ENUMERATION:
        raise ValueError(f"space too large to enumerate: {n} x 2^{k} outcomes")
    pi = params.pi
    beta = params.beta
    outcomes, probs = outcome_probabilities(params)
    d_alpha = np.zeros(n)
    d_beta = np.zeros((n, k))
    value = 0.0
    for (c, bits), p in zip(outcomes, probs):
        loss = float(loss_fn(c, bits))
        value += p * loss
        score = -pi.copy()
        score[c] += 1.0
        d_alpha += p * loss * score
        d_beta[c] += p * loss * (np.array(bits) - beta[c])
    return GradEstimate(d_alpha, d_beta, np.zeros((n, k)), {"estimator": "exact", "value": value})


# ---------------------------------------------------------------- Monte Carlo harness

def table_loss(table: np.ndarray) -> Callable[[int, tuple], float]:
    """``table`` has shape (N,) + (2,) * k and holds loss(c, bits)."""
    table = np.asarray(table, dtype=np.float64)
    return lambda c, bits: float(table[(int(c),) + tuple(int(b) for b in bits)])


def table_lookup(table: np.ndarray, index: np.ndarray, bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.intp)
    return np.asarray(table)[(np.asarray(index),) + tuple(bits.T)]


def table_sensitivities(table: np.ndarray, sample: SampledPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through sensitivities for a loss table.

    The loss is extended multilinearly: d loss / d h is the chosen entry and
    d loss / d b_j is the difference between the entries with bit j on and off.
    """
    idx, bits = sample.subpolicy_index, sample.bits.astype(np.intp)
    dl_dh = table_lookup(table, idx, bits)
    dl_db = np.empty(bits.shape)
    for j in range(bits.shape[1]):
        on, off = bits.copy(), bits.copy()
        on[:, j], off[:, j] = 1, 0
        dl_db[:, j] = table_lookup(table, idx, on) - table_lookup(table, idx, off)
    return dl_dh, dl_db


def draw_estimate(kind: str, table: np.ndarray, params: PolicyParams, rng: np.random.Generator,
                  size: int, tau: float = 0.5, surrogate: Surrogate | None = None) -> GradEstimate:
    from .policy import sample_policy

    sample = sample_policy(params, None, tau, rng, size=size)
    if kind == "score":
        return score_grad(table_lookup(table, sample.subpolicy_index, sample.bits), sample, params)
    if kind == "gumbel_st":
        return gumbel_st_grad(*table_sensitivities(table, sample), sample, params)
    if kind == "relax":
        return relax_grad(table_lookup(table, sample.subpolicy_index, sample.bits), sample, params,
                          surrogate)
    raise ValueError(f"unknown estimator {kind!r}")


@dataclass
class MonteCarloStats:
    estimator: str
    mean: np.ndarray        # flattened (alpha, beta) components
    variance: np.ndarray    # per-draw variance
    samples: int

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(self.variance / self.samples)


def monte_carlo(kind: str, table: np.ndarray, params: PolicyParams, samples: int,
                rng: np.random.Generator, tau: float = 0.5, surrogate: Surrogate | None = None,
                chunk: int | None = None) -> MonteCarloStats:
    """Per-component mean and per-draw variance over ``samples`` single draws."""
    n, k = params.beta_logits.shape
    chunk = chunk or max(100, min(10000, 2_000_000 // (n * (k + 1))))
    total = total_sq = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        est = draw_estimate(kind, table, params, rng, m, tau, surrogate)
        per = np.concatenate([est.diagnostics["alpha_samples"],
                              est.diagnostics["beta_samples"].reshape(m, -1)], axis=1)
        total = total + per.sum(axis=0)
        total_sq = total_sq + (per * per).sum(axis=0)
        done += m
    mean = total / samples
    var = np.maximum(total_sq / samples - mean * mean, 0.0) * samples / max(samples - 1, 1)
    return MonteCarloStats(kind, mean, var, samples)


def flat_exact(params: PolicyParams, table: np.ndarray) -> np.ndarray:
    exact = enumerate_exact_grad(params, table_loss(table))
    return np.concatenate([exact.d_alpha, exact.d_beta.reshape(-1)])


def component_names(n: int, k: int) -> list[str]:
    return [f"alpha[{i}]" for i in range(n)] + [f"beta[{i},{j}]" for i in range(n) for j in range(k)]


def fit_surrogate(table: np.ndarray, params: PolicyParams, surrogate: Surrogate, steps: int,
                  rng: np.random.Generator, batch: int = 8, lr: float = 5e-3, tau: float = 0.5,
                  theta_lr: float = 0.0) -> PolicyParams:
    """Joint RELAX optimisation on a loss table: Adam on the surrogate (variance
    objective) and, when ``theta_lr > 0``, Adam on (alpha, beta logits)."""
    from .models import Adam

    opt_phi = Adam([p.data for p in surrogate.params], lr)
    opt_theta = Adam([params.alpha, params.beta_logits], theta_lr) if theta_lr > 0 else None
    for _ in range(steps):
        est = draw_estimate("relax", table, params, rng, batch, tau, surrogate)
        update_surrogate(est, surrogate, opt_phi)
        if opt_theta is not None:
            opt_theta.step([est.d_alpha, est.d_beta])
            params.project()
    return params
