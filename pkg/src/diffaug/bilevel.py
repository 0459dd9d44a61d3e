"""One-pass joint search: alternate classifier weight steps and policy steps.

A policy step takes a virtual SGD step on the weights, measures the
validation gradient there, and turns it into a hypergradient for the policy
parameters with a central finite difference of the training-loss policy
gradient around the current weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import estimators as E
from .augment import DEFAULT_OPS
from .data import Dataset
from .models import SGD, Adam, Classifier, build_classifier, evaluate_loss, linear_lr
from .policy import (PolicyParams, SampledPolicy, SearchSpace, augment_with, build_space,
                     export_policy, flipped_bit_images, init_params, sample_policy)

log = logging.getLogger(__name__)

ESTIMATORS = ("relax", "gumbel_st", "score")
METRIC_COLUMNS = ("epoch", "step", "train_loss", "val_loss", "pi_entropy", "mean_beta", "mean_m",
                  "skipped_steps")


class ConfigError(ValueError):
    pass


@dataclass
class SearchConfig:
    epochs: int = 20
    batch_size: int = 128
    tau: float = 0.5
    lam: float | None = None
    estimator: str = "relax"
    seed: int = 0
    ops: tuple = DEFAULT_OPS
    k: int = 2
    pairing: str = "unordered"
    top_n: int = 25
    arch: str = "mlp"
    weight_lr: float | None = None     # None: linear rule 0.1 * batch / 256
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine: bool = False
    policy_lr: float = 5e-3
    policy_betas: tuple = (0.5, 0.999)
    surrogate_hidden: int = 100
    surrogate_scale: float = 0.1       # small init: hypergradient losses are O(1e-2)
    epsilon_scale: float = 0.01
    clean_baseline: bool = True        # subtract each image's un-augmented loss
    n_reduced: int = 4000

    def __post_init__(self):
        self.ops = tuple(self.ops)
        self.policy_betas = tuple(self.policy_betas)
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.tau <= 0 or (self.lam is not None and self.lam <= 0):
            raise ConfigError("temperatures must be positive")
        if self.pairing not in ("unordered", "ordered"):
            raise ConfigError(f"unknown pairing {self.pairing!r}")
        if self.epsilon_scale <= 0:
            raise ConfigError("epsilon_scale must be positive")

    @property
    def bernoulli_temperature(self) -> float:
        return self.tau if self.lam is None else self.lam

    @property
    def initial_weight_lr(self) -> float:
        return linear_lr(self.batch_size) if self.weight_lr is None else self.weight_lr

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ops"] = list(self.ops)
        out["policy_betas"] = list(self.policy_betas)
        return out


# ---------------------------------------------------------------- hypergradient

def finite_difference_hypergradient(w: Sequence[np.ndarray], zeta: float,
                                    grad_w_train: Callable, grad_w_val: Callable,
                                    grad_d_train: Callable, epsilon_scale: float = 0.01,
                                    min_norm: float = 1e-12):
    """``-zeta (g_d(w+) - g_d(w-)) / (2 eps)`` with ``w+- = w +- eps grad L_val(w')``.

    ``w' = w - zeta grad_w L_train(w)`` and ``eps = epsilon_scale / |grad L_val(w')|``.
    Returns ``(hypergradient, info)``, or ``(None, info)`` when the validation
    gradient vanishes.  ``grad_d_train`` may return arrays or GradEstimates.
    """
    w = [np.asarray(a, dtype=np.float64) for a in w]
    g_train = grad_w_train(w)
    w_virtual = [a - zeta * g for a, g in zip(w, g_train)]
    g_val = grad_w_val(w_virtual)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in g_val))
    info = {"val_grad_norm": norm}
    if not norm >= min_norm:
        return None, info
    eps = epsilon_scale / norm
    info["epsilon"] = eps
    plus = grad_d_train([a + eps * g for a, g in zip(w, g_val)])
    minus = grad_d_train([a - eps * g for a, g in zip(w, g_val)])
    scale = -zeta / (2.0 * eps)
    if hasattr(plus, "combine"):
        return plus.combine(minus, scale), info
    return scale * (np.asarray(plus) - np.asarray(minus)), info


# ---------------------------------------------------------------- search state

@dataclass
class SearchState:
    config: SearchConfig
    space: SearchSpace
    model: Classifier
    params: PolicyParams
    weight_opt: SGD
    policy_opt: Adam
    surrogate: E.Surrogate | None
    surrogate_opt: Adam | None
    rng: np.random.Generator
    step: int = 0
    skipped_steps: int = 0
    total_steps: int = 0
    last: dict = field(default_factory=dict)

    @property
    def zeta(self) -> float:
        return self.weight_opt.lr


def init_state(config: SearchConfig, image_shape: tuple, num_classes: int) -> SearchState:
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    space = build_space(config.ops, config.k, config.pairing)
    model = build_classifier(config.arch, image_shape, num_classes, np.random.default_rng(seeds[0]))
    params = init_params(space)
    weight_opt = SGD(model.arrays(), config.initial_weight_lr, config.momentum, config.weight_decay)
    policy_opt = Adam(params.arrays(), config.policy_lr, config.policy_betas, weight_decay=0.0)
    surrogate = surrogate_opt = None
    if config.estimator == "relax":
        surrogate = E.Surrogate.create(space.n + space.k, config.surrogate_hidden,
                                       np.random.default_rng(seeds[1]), config.surrogate_scale)
        surrogate_opt = Adam([p.data for p in surrogate.params], config.policy_lr,
                             config.policy_betas, weight_decay=0.0)
    return SearchState(config, space, model, params, weight_opt, policy_opt, surrogate,
                       surrogate_opt, np.random.default_rng(seeds[2]))


def _draw(state: SearchState, size: int) -> SampledPolicy:
    cfg = state.config
    return sample_policy(state.params, state.space, cfg.tau, state.rng, size=size,
                         lam=cfg.bernoulli_temperature)


def weight_step(state: SearchState, train_batch) -> float:
    """One SGD-momentum step on the weights with a freshly augmented batch."""
    x, y = train_batch
    sample = _draw(state, len(x))
    ev = evaluate_loss(state.model, augment_with(state.space, x, sample), y)
    state.weight_opt.step(ev.weight_grads)
    return ev.loss


def magnitude_gradient(space: SearchSpace, sample: SampledPolicy, input_grad: np.ndarray) -> np.ndarray:
    """Straight-through magnitude gradient for applied, magnitude-using slots."""
    d_m = np.zeros((space.n, space.k))
    per_image = input_grad.reshape(len(input_grad), -1).sum(axis=1)
    live = sample.bits.astype(bool) & space.uses_magnitude()[sample.subpolicy_index]
    for j in range(space.k):
        np.add.at(d_m[:, j], sample.subpolicy_index[live[:, j]], per_image[live[:, j]])
    return d_m


def policy_gradient(state: SearchState, losses: np.ndarray, input_grad: np.ndarray,
                    sample: SampledPolicy, x_aug: np.ndarray, branches: np.ndarray | None) -> E.GradEstimate:
    """Gradient estimate of the mean training loss w.r.t. (alpha, beta logits, m)."""
    kind = state.config.estimator
    if kind == "score":
        est = E.score_grad(losses, sample, state.params)
    elif kind == "relax":
        est = E.relax_grad(losses, sample, state.params, state.surrogate)
    else:
        per_image = input_grad * len(losses)
        flat = per_image.reshape(len(losses), -1)
        dl_dh = np.einsum("bi,bi->b", flat, x_aug.reshape(len(losses), -1))
        sign = np.where(sample.bits > 0.5, 1.0, -1.0)
        diffs = x_aug[None] - branches                     # (k, B, ...)
        dl_db = np.einsum("bi,kbi->bk", flat, diffs.reshape(diffs.shape[0], len(losses), -1)) * sign
        est = E.gumbel_st_grad(dl_dh, dl_db, sample, state.params)
    est.d_m = magnitude_gradient(state.space, sample, input_grad)
    return est


@dataclass
class LossProbe:
    """Per-draw training losses and input gradients at one weight setting."""
    losses: np.ndarray
    input_grad: np.ndarray

    def combine(self, other: "LossProbe", scale: float) -> "LossProbe":
        return LossProbe(scale * (self.losses - other.losses), scale * (self.input_grad - other.input_grad))


def policy_step(state: SearchState, train_batch, val_batch) -> dict:
    """Virtual step + finite-difference hypergradient + Adam step on the policy.

    The w+ and w- evaluations share one sampled batch and all of its noise.
    With ``clean_baseline`` the per-draw loss is measured relative to the same
    image without augmentation.
    Score and straight-through estimates are linear in the per-draw losses
    and input gradients, so the estimator is applied once to their scaled
    difference; for RELAX this keeps the control variate from cancelling and
    lets the surrogate be fitted to the hypergradient it is used for.
    """
    x, y = train_batch
    xv, yv = val_batch
    if len(x) == 0 or len(xv) == 0:
        raise ValueError("policy_step needs non-empty batches")
    cfg = state.config
    sample = _draw(state, len(x))
    x_aug = augment_with(state.space, x, sample)
    branches = flipped_bit_images(state.space, x, sample) if cfg.estimator == "gumbel_st" else None
    record: dict = {}

    def grad_w_train(w):
        return evaluate_loss(state.model, x_aug, y, w).weight_grads

    def grad_w_val(w):
        ev = evaluate_loss(state.model, xv, yv, w)
        record["val_loss"] = ev.loss
        return ev.weight_grads

    def grad_d_train(w):
        ev = evaluate_loss(state.model, x_aug, y, w, input_grad=True, weight_grads=False)
        losses = ev.per_example
        if cfg.clean_baseline:
            # the clean loss does not depend on the policy draw, so this is a
            # per-image baseline that removes image difficulty from the signal
            losses = losses - evaluate_loss(state.model, x, y, w, weight_grads=False).per_example
        return LossProbe(losses, ev.input_grad)

    probe, info = finite_difference_hypergradient(state.model.arrays(), state.zeta, grad_w_train,
                                                  grad_w_val, grad_d_train, cfg.epsilon_scale)
    record.update(info)
    state.total_steps += 1
    hyper = None
    if probe is not None:
        hyper = policy_gradient(state, probe.losses, probe.input_grad, sample, x_aug, branches)
    if hyper is None or not all(np.all(np.isfinite(a)) for a in hyper.arrays()):
        state.skipped_steps += 1
        log.info("policy step %d skipped (%s)", state.step,
                 "vanishing validation gradient" if hyper is None else "non-finite hypergradient")
        record["skipped"] = True
        return record
    state.policy_opt.step(hyper.arrays())
    state.params.project()
    if cfg.estimator == "relax":
        E.update_surrogate(hyper, state.surrogate, state.surrogate_opt)
        record["surrogate_objective"] = hyper.objective.item()
    record["skipped"] = False
    state.last = record
    return record


# ---------------------------------------------------------------- search loop

def pi_entropy(params: PolicyParams) -> float:
    pi = params.pi
    return float(-np.sum(pi * np.log(np.maximum(pi, 1e-300))))


def _cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


@dataclass
class SearchResult:
    policy: dict
    metrics: list[dict]
    state: SearchState


def run_search(config: SearchConfig, train: Dataset, val: Dataset,
               progress: Callable[[dict], None] | None = None) -> SearchResult:
    if len(train) == 0 or len(val) == 0:
        raise ValueError("search needs non-empty train and validation sets")
    state = init_state(config, train.image_shape, train.class_count)
    bs = config.batch_size
    steps_per_epoch = max(1, math.ceil(len(train) / bs))
    total = steps_per_epoch * config.epochs
    metrics = []
    for epoch in range(config.epochs):
        order = state.rng.permutation(len(train))
        train_losses = []
        for start in range(0, len(train), bs):
            if config.cosine:
                state.weight_opt.lr = _cosine_lr(config.initial_weight_lr, state.step, total)
            idx = order[start:start + bs]
            batch = (train.images[idx], train.labels[idx])
            train_losses.append(weight_step(state, batch))
            vidx = state.rng.choice(len(val), size=min(bs, len(val)), replace=False)
            policy_step(state, batch, (val.images[vidx], val.labels[vidx]))
            state.step += 1
        val_loss = evaluate_loss(state.model, val.images, val.labels, weight_grads=False).loss
        row = {"epoch": epoch + 1, "step": state.step, "train_loss": float(np.mean(train_losses)),
               "val_loss": val_loss, "pi_entropy": pi_entropy(state.params),
               "mean_beta": float(state.params.beta.mean()),
               "mean_m": float(state.params.magnitudes.mean()), "skipped_steps": state.skipped_steps}
        metrics.append(row)
        log.info("epoch %(epoch)d train %(train_loss).4f val %(val_loss).4f H(pi) %(pi_entropy).4f", row)
        if progress is not None:
            progress(row)
    top_n = min(config.top_n, state.space.n)
    if top_n < config.top_n:
        log.info("top_n %d exceeds the %d sub-policies; exporting all", config.top_n, state.space.n)
    return SearchResult(export_policy(state.params, state.space, top_n), metrics, state)


# ---------------------------------------------------------------- evaluation

@dataclass
class TrainConfig:
    epochs: int = 40           # augmented training needs longer than the search to pay off
    batch_size: int = 128
    arch: str = "mlp"
    lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    cosine: bool = True
    seed: int = 0


def train_classifier(train: Dataset, augment: Callable | None, config: TrainConfig,
                     history: list | None = None) -> Classifier:
    """Plain SGD training; ``augment(images, rng)`` is applied to every batch.

    Per-epoch mean training loss is appended to ``history`` when given.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(seeds[1])
    model = build_classifier(config.arch, train.image_shape, train.class_count,
                             np.random.default_rng(seeds[0]))
    base_lr = linear_lr(config.batch_size) if config.lr is None else config.lr
    opt = SGD(model.arrays(), base_lr, config.momentum, config.weight_decay)
    total = config.epochs * math.ceil(len(train) / config.batch_size)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), config.batch_size):
            idx = order[start:start + config.batch_size]
            x = train.images[idx]
            if augment is not None:
                x = augment(x, rng)
            if config.cosine:
                opt.lr = _cosine_lr(base_lr, step, total)
            ev = evaluate_loss(model, x, train.labels[idx])
            opt.step(ev.weight_grads)
            losses.append(ev.loss)
            step += 1
        if history is not None:
            history.append({"epoch": epoch + 1, "train_loss": float(np.mean(losses))})
    return model


def evaluate_policy(policy: dict | None, train: Dataset, test: Dataset, config: TrainConfig,
                    history: list | None = None) -> dict:
    """Train a fresh classifier under ``policy`` (None: no augmentation) and test it."""
    from .models import accuracy
    from .policy import FixedPolicy

    fixed = FixedPolicy(policy) if policy is not None else None
    augment = fixed.augment if fixed is not None and len(fixed) else None
    model = train_classifier(train, augment, config, history)
    acc = accuracy(model, test.images, test.labels)
    return {"accuracy": acc, "error": 1.0 - acc, "subpolicies": 0 if fixed is None else len(fixed),
            "seed": config.seed, "epochs": config.epochs, "arch": config.arch}
