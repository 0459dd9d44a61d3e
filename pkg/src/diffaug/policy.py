"""Sub-policy search space, learnable policy parameters and policy sampling."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import distributions as D
from .augment import apply_op, get_op

POLICY_VERSION = 1


@dataclass(frozen=True)
class SearchSpace:
    ops: tuple[str, ...]
    k: int
    subpolicies: tuple[tuple[str, ...], ...]
    pairing_mode: str = "unordered"

    @property
    def n(self) -> int:
        return len(self.subpolicies)

    def uses_magnitude(self) -> np.ndarray:
        """(N, k) mask of slots whose op consumes a magnitude."""
        return np.array([[get_op(name).uses_magnitude for name in sp] for sp in self.subpolicies],
                        dtype=bool).reshape(self.n, self.k)


def build_space(op_names: Sequence[str], k: int = 2, pairing_mode: str = "unordered") -> SearchSpace:
    op_names = tuple(op_names)
    if len(set(op_names)) != len(op_names):
        raise ValueError("duplicate op names")
    if not 1 <= k <= len(op_names):
        raise ValueError(f"need 1 <= k <= {len(op_names)}, got k={k}")
    for name in op_names:
        get_op(name)
    if pairing_mode == "unordered":
        combos = itertools.combinations(range(len(op_names)), k)
    elif pairing_mode == "ordered":
        combos = itertools.product(range(len(op_names)), repeat=k)
    else:
        raise ValueError(f"unknown pairing mode {pairing_mode!r}")
    subs = tuple(tuple(op_names[i] for i in combo) for combo in combos)
    return SearchSpace(op_names, k, subs, pairing_mode)


@dataclass
class PolicyParams:
    alpha: np.ndarray          # (N,)
    beta_logits: np.ndarray    # (N, k)
    magnitudes: np.ndarray     # (N, k) in [0, 1]

    @property
    def pi(self) -> np.ndarray:
        return D.probabilities(self.alpha)

    @property
    def beta(self) -> np.ndarray:
        return D._sigmoid(self.beta_logits)

    def arrays(self) -> list[np.ndarray]:
        return [self.alpha, self.beta_logits, self.magnitudes]

    def project(self) -> None:
        np.clip(self.magnitudes, 0.0, 1.0, out=self.magnitudes)
        np.clip(self.beta_logits, -D.LOGIT_CLAMP, D.LOGIT_CLAMP, out=self.beta_logits)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.alpha.copy(), self.beta_logits.copy(), self.magnitudes.copy())


def init_params(space: SearchSpace, alpha0: float = 1e-3, beta0: float = 0.5,
                magnitude0: float = 0.5) -> PolicyParams:
    return PolicyParams(
        alpha=np.full(space.n, alpha0),
        beta_logits=np.full((space.n, space.k), float(D.logit(beta0))),
        magnitudes=np.full((space.n, space.k), magnitude0),
    )


@dataclass
class SampledPolicy:
    """A batch of B policy draws (B may be 1).

    ``bernoulli`` holds the k apply-bit draws of the chosen sub-policy;
    ``op_seeds`` seed the per-slot randomness of the ops (signs, cutout
    position) so a batch can be replayed exactly.
    """
    subpolicy_index: np.ndarray          # (B,) int
    categorical: D.RelaxedSample         # z, z_tilde, noise: (B, N)
    bernoulli: D.RelaxedSample           # z, q, z_tilde, noise: (B, k)
    magnitudes_used: np.ndarray          # (B, k)
    op_seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tau: float = 0.5
    lam: float = 0.5

    def __len__(self) -> int:
        return len(self.subpolicy_index)

    @property
    def bits(self) -> np.ndarray:
        return self.bernoulli.q


def sample_policy(params: PolicyParams, space: SearchSpace, tau: float, rng: np.random.Generator,
                  size: int = 1, lam: float | None = None) -> SampledPolicy:
    lam = tau if lam is None else lam
    cat = D.sample_relaxed_categorical(params.alpha, tau, rng, size=(size,))
    idx = np.asarray(cat.q)
    t = D.clamp_logits(params.beta_logits[idx])
    u = D.clamp_uniform(rng.random(t.shape))
    v = D.clamp_uniform(rng.random(t.shape))
    z = D.relaxed_bernoulli(t, u, lam)
    b = D.hard_bernoulli(z)
    bern = D.RelaxedSample(z=z, q=b, z_tilde=D.conditional_bernoulli(t, b, v, lam),
                           u_noise=u, v_noise=v)
    seeds = rng.integers(0, 2**62, size=size)
    return SampledPolicy(idx, cat, bern, params.magnitudes[idx].copy(), seeds, tau, lam)


def _slot_rng(seed: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), slot])


def apply_sampled(space: SearchSpace, x: np.ndarray, index: int, bits: Sequence, mags: Sequence,
                  seed: int) -> np.ndarray:
    """Apply one drawn sub-policy; each slot has its own RNG so skipping a slot
    never perturbs the randomness of the others."""
    for slot, (name, b, m) in enumerate(zip(space.subpolicies[index], bits, mags)):
        if b:
            x = apply_op(name, x, float(m), _slot_rng(seed, slot))
    return x


def augment_with(space: SearchSpace, images: np.ndarray, sample: SampledPolicy,
                 bits: np.ndarray | None = None) -> np.ndarray:
    bits = sample.bits if bits is None else bits
    out = np.empty_like(images)
    for i in range(len(images)):
        out[i] = apply_sampled(space, images[i], int(sample.subpolicy_index[i]), bits[i],
                               sample.magnitudes_used[i], int(sample.op_seeds[i]))
    return out


def augment_batch(params: PolicyParams, space: SearchSpace, images: np.ndarray, tau: float,
                  rng: np.random.Generator, lam: float | None = None) -> tuple[np.ndarray, SampledPolicy]:
    """Augment each image with its own independently drawn sub-policy (hard forward)."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("empty batch")
    sample = sample_policy(params, space, tau, rng, size=len(images), lam=lam)
    return augment_with(space, images, sample), sample


def flipped_bit_images(space: SearchSpace, images: np.ndarray, sample: SampledPolicy) -> np.ndarray:
    """(k, B, ...) images with each slot's apply-bit forced to 1 - b (others as drawn)."""
    out = []
    for j in range(space.k):
        bits = sample.bits.copy()
        bits[:, j] = 1.0 - bits[:, j]
        out.append(augment_with(space, images, sample, bits))
    return np.stack(out)


# ---------------------------------------------------------------- export / import

def export_policy(params: PolicyParams, space: SearchSpace, top_n: int = 25) -> dict:
    if not 0 <= top_n <= space.n:
        raise ValueError(f"top_n={top_n} must be within [0, {space.n}]")
    pi = params.pi
    order = sorted(range(space.n), key=lambda s: (-pi[s], s))[:top_n]
    beta = params.beta
    subs = []
    for rank, s in enumerate(order, start=1):
        subs.append({
            "rank": rank,
            "pi": float(pi[s]),
            "ops": [{"name": name, "prob": float(beta[s, j]), "magnitude": float(params.magnitudes[s, j])}
                    for j, name in enumerate(space.subpolicies[s])],
        })
    return {"version": POLICY_VERSION, "k": space.k, "subpolicies": subs}


def validate_policy(doc) -> dict:
    def bad(msg):
        raise ValueError(f"invalid policy file: {msg}")

    if not isinstance(doc, dict) or doc.get("version") != POLICY_VERSION:
        bad("missing or unsupported version")
    k = doc.get("k")
    if not isinstance(k, int) or k < 1:
        bad("k must be a positive integer")
    subs = doc.get("subpolicies")
    if not isinstance(subs, list):
        bad("subpolicies must be a list")
    for sp in subs:
        if not isinstance(sp, dict) or not isinstance(sp.get("rank"), int):
            bad("each sub-policy needs an integer rank")
        if not isinstance(sp.get("pi"), (int, float)) or not isinstance(sp.get("ops"), list):
            bad("each sub-policy needs pi and ops")
        if len(sp["ops"]) != k:
            bad(f"sub-policy {sp['rank']} has {len(sp['ops'])} ops, expected {k}")
        for op in sp["ops"]:
            if not isinstance(op, dict) or not isinstance(op.get("name"), str):
                bad("op entries need a name")
            try:
                get_op(op["name"])
            except KeyError:
                bad(f"unknown op {op['name']!r}")
            for key in ("prob", "magnitude"):
                val = op.get(key)
                if not isinstance(val, (int, float)) or not 0.0 <= val <= 1.0 or math.isnan(val):
                    bad(f"op {key} must be a number in [0, 1]")
    return doc


def save_policy(doc: dict, path) -> None:
    # repr-exact floats: json writes the shortest string that round-trips
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_policy(path) -> dict:
    return validate_policy(json.loads(Path(path).read_text()))


class FixedPolicy:
    """Stochastic application of an exported policy: pick a sub-policy uniformly,
    then apply each op with its probability at its magnitude."""

    def __init__(self, doc: dict):
        self.doc = validate_policy(doc)
        self.subpolicies = [[(op["name"], float(op["prob"]), float(op["magnitude"])) for op in sp["ops"]]
                            for sp in doc["subpolicies"]]

    def __len__(self) -> int:
        return len(self.subpolicies)

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.subpolicies:
            return x
        sp = self.subpolicies[int(rng.integers(len(self.subpolicies)))]
        for name, prob, mag in sp:
            if rng.random() < prob:
                x = apply_op(name, x, mag, rng)
        return x

    def augment(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.subpolicies:
            return images
        return np.stack([self(img, rng) for img in images])
