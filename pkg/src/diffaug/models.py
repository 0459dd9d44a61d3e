"""Small classifiers on the autodiff engine, plus the two optimisers."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad


# ---------------------------------------------------------------- optimisers

class SGD:
    """Classical momentum: ``v <- mu v + g``; ``w <- w - lr (v + wd w)``."""

    kind = "sgd-momentum"

    def __init__(self, params: Sequence[np.ndarray], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        _check_shapes(self.params, grads)
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p -= self.lr * (v + self.weight_decay * p)


class Adam:
    kind = "adam"

    def __init__(self, params: Sequence[np.ndarray], lr: float = 5e-3,
                 betas: tuple[float, float] = (0.5, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        _check_shapes(self.params, grads)
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check_shapes(params, grads) -> None:
    if len(params) != len(grads):
        raise ValueError(f"expected {len(params)} gradients, got {len(grads)}")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {np.shape(p)}")


def sgd_step(state: SGD, params=None, grads=None) -> None:
    state.step(grads)


def adam_step(state: Adam, params=None, grads=None) -> None:
    state.step(grads)


def linear_lr(batch_size: int, base: float = 0.1, base_batch: int = 256) -> float:
    return base * batch_size / base_batch


# ---------------------------------------------------------------- classifiers

def _he(rng, fan_in, shape):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _conv_index(h: int, w: int, c: int) -> np.ndarray:
    """Gather indices turning a zero-padded (h+2, w+2, c) image into 3x3 patches."""
    i, j, di, dj, ch = np.meshgrid(np.arange(h), np.arange(w), np.arange(3), np.arange(3),
                                   np.arange(c), indexing="ij")
    return (((i + di) * (w + 2) + (j + dj)) * c + ch).reshape(-1)


def im2col3x3(x: ad.Tensor) -> ad.Tensor:
    """(B, H, W, C) -> (B H W, 9 C) same-padded 3x3 patches, ordered (di, dj, c).

    Equivalent to ``index_select`` with :func:`_conv_index` on the padded,
    flattened input, but built from strided views and nine slice-adds.
    """
    b, h, w, c = x.shape
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))  # (B,H,W,C,3,3)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, 9 * c)

    def bw(g):
        g = g.reshape(b, h, w, 3, 3, c)
        gpad = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                gpad[:, di:di + h, dj:dj + w, :] += g[:, :, :, di, dj, :]
        return (gpad[:, 1:-1, 1:-1, :],)

    return ad._make("im2col", cols, (x,), bw)


def conv3x3(x: ad.Tensor, weight: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    """Same-padded 3x3 convolution via im2col; ``x`` is (B, H, W, C), weight (9 C, C_out)."""
    b, h, w, c = x.shape
    out = ad.matmul(im2col3x3(x), weight) + bias
    return ad.reshape(out, (b, h, w, weight.shape[1]))


def avg_pool2(x: ad.Tensor) -> ad.Tensor:
    b, h, w, c = x.shape
    return ad.mean(ad.reshape(x, (b, h // 2, 2, w // 2, 2, c)), axis=(2, 4))


@dataclass
class Classifier:
    arch: str
    weights: list[ad.Tensor]
    hyper: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.hyper["num_classes"]

    def arrays(self) -> list[np.ndarray]:
        return [w.data for w in self.weights]

    def logits(self, images, weights: Sequence[ad.Tensor] | None = None) -> ad.Tensor:
        weights = self.weights if weights is None else weights
        x = ad.as_tensor(images)
        if self.arch == "mlp":
            h = ad.reshape(x, (x.shape[0], -1))
            for i in range(0, len(weights) - 2, 2):
                h = ad.relu(ad.matmul(h, weights[i]) + weights[i + 1])
            return ad.matmul(h, weights[-2]) + weights[-1]
        if self.arch == "smallcnn":
            h = x
            for i in range(0, len(weights) - 2, 2):
                h = avg_pool2(ad.relu(conv3x3(h, weights[i], weights[i + 1])))
            h = ad.reshape(h, (h.shape[0], -1))
            return ad.matmul(h, weights[-2]) + weights[-1]
        raise ValueError(f"unknown architecture {self.arch!r}")

    def per_example_loss(self, images, labels, weights=None) -> ad.Tensor:
        return ad.cross_entropy(self.logits(images, weights), labels)

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.logits(images).data, axis=1)


def build_mlp(input_shape: tuple, num_classes: int, hidden: Sequence[int] = (128, 128),
              rng: np.random.Generator | None = None) -> Classifier:
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = [int(np.prod(input_shape)), *hidden, num_classes]
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights += [ad.Tensor(_he(rng, fan_in, (fan_in, fan_out)), True),
                    ad.Tensor(np.zeros(fan_out), True)]
    return Classifier("mlp", weights, {"input_shape": tuple(input_shape), "num_classes": num_classes,
                                       "hidden": list(hidden)})


def build_smallcnn(input_shape: tuple, num_classes: int, channels: Sequence[int] = (16, 32),
                   rng: np.random.Generator | None = None) -> Classifier:
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w, c = input_shape
    if h % 2 ** len(channels) or w % 2 ** len(channels):
        raise ValueError("image side must be divisible by 2 per conv layer")
    weights = []
    for c_out in channels:
        weights += [ad.Tensor(_he(rng, 9 * c, (9 * c, c_out)), True), ad.Tensor(np.zeros(c_out), True)]
        c, h, w = c_out, h // 2, w // 2
    fan_in = h * w * c
    weights += [ad.Tensor(_he(rng, fan_in, (fan_in, num_classes)), True),
                ad.Tensor(np.zeros(num_classes), True)]
    return Classifier("smallcnn", weights, {"input_shape": tuple(input_shape),
                                            "num_classes": num_classes, "channels": list(channels)})


def build_classifier(arch: str, input_shape: tuple, num_classes: int,
                     rng: np.random.Generator | None = None) -> Classifier:
    if arch == "mlp":
        return build_mlp(input_shape, num_classes, rng=rng)
    if arch == "smallcnn":
        return build_smallcnn(input_shape, num_classes, rng=rng)
    raise ValueError(f"unknown architecture {arch!r}")


def forward_loss(model: Classifier, images, labels, weights=None) -> ad.Tensor:
    """Mean cross-entropy over the batch, recorded on the tape."""
    if len(images) == 0:
        raise ValueError("empty batch")
    return ad.mean(model.per_example_loss(images, labels, weights))


@dataclass
class LossEval:
    loss: float
    per_example: np.ndarray
    weight_grads: list[np.ndarray]
    input_grad: np.ndarray | None = None


def evaluate_loss(model: Classifier, images: np.ndarray, labels: np.ndarray,
                  weights: Sequence[np.ndarray] | None = None, input_grad: bool = False,
                  weight_grads: bool = True) -> LossEval:
    """Mean loss at ``weights`` (defaults to the model's own) and its gradients.

    The model's weights are never modified.  ``input_grad`` returns
    d(mean loss)/d(images).
    """
    arrays = model.arrays() if weights is None else weights
    w = [ad.Tensor(a, requires_grad=weight_grads) for a in arrays]
    x = ad.Tensor(images, requires_grad=input_grad)
    per = model.per_example_loss(x, labels, w)
    loss = ad.mean(per)
    if not (weight_grads or input_grad):
        return LossEval(loss.item(), per.data, [])
    ad.backward(loss)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in w] if weight_grads else []
    return LossEval(loss.item(), per.data, grads, x.grad if input_grad else None)


def accuracy(model: Classifier, images: np.ndarray, labels: np.ndarray, batch: int = 512) -> float:
    hits = 0
    for i in range(0, len(images), batch):
        hits += int(np.sum(model.predict(images[i:i + batch]) == labels[i:i + batch]))
    return hits / max(len(images), 1)


# ---------------------------------------------------------------- checkpoints
#
# little-endian layout:
#   magic b"AUGCKPT1" | u32 version | u32 count
#   count x (u32 ndim, ndim x u64 dims, u64 byte offset into data section)
#   data section: concatenated float64 arrays

CKPT_MAGIC = b"AUGCKPT1"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: Sequence[np.ndarray]) -> None:
    header = bytearray(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(arrays)))
    offset = 0
    for a in arrays:
        header += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        header += struct.pack("<Q", offset)
        offset += a.size * 8
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    Path(path).write_bytes(bytes(header) + blob)


def load_checkpoint(path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    index = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, pos)
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos + 4)
        (offset,) = struct.unpack_from("<Q", raw, pos + 4 + 8 * ndim)
        pos += 4 + 8 * ndim + 8
        index.append((shape, offset))
    out = []
    for shape, offset in index:
        n = int(np.prod(shape))
        start = pos + offset
        if start + 8 * n > len(raw):
            raise ValueError("truncated checkpoint")
        out.append(np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(shape).copy())
    return out
