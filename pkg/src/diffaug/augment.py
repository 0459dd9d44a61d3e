"""Image augmentation primitives on float images in [0, 1], channel-last (H, W, C).

Magnitudes are normalised to [0, 1] and mapped linearly into each op's
native range.  Signed ops (geometry, colour enhancement, brightness) draw a
random sign from the RNG passed to :func:`apply_op`, AutoAugment style, so a
magnitude of 0 is the identity and larger magnitudes are stronger.

Native ranges:

=============  ==================  ==========================================
op             range (m=0 -> m=1)  meaning
=============  ==================  ==========================================
shear-x/y      0 -> 0.3            shear coefficient, random sign
translate-x/y  0 -> 0.45           fraction of image size, random sign
rotate         0 -> 30             degrees, random sign
solarize       1.0 -> 0.0          threshold; pixels >= threshold inverted
posterize      8 -> 4              bits kept (rounded)
contrast       0 -> 0.9            enhance factor 1 +/- value
color          0 -> 0.9            enhance factor 1 +/- value
brightness     0 -> 0.45           additive shift, random sign
sharpness      0 -> 0.9            enhance factor 1 +/- value
cutout         0 -> 0.6            square side as a fraction of image size
auto-contrast, invert, equalize    magnitude ignored
=============  ==================  ==========================================
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentOp:
    name: str
    uses_magnitude: bool
    magnitude_range: tuple[float, float]
    signed: bool
    fn: Callable[[np.ndarray, float, np.random.Generator], np.ndarray]

    def native(self, m01: float) -> float:
        lo, hi = self.magnitude_range
        return lo + float(m01) * (hi - lo)


def _affine(x: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Warp each channel with output->input mapping ``in = matrix @ out + offset`` (row, col)."""
    out = np.empty_like(x)
    for ch in range(x.shape[2]):
        out[..., ch] = ndimage.affine_transform(x[..., ch], matrix, offset=offset, order=1,
                                                mode="constant", cval=0.0, prefilter=False)
    return out


def _centered(x: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    centre = (np.array(x.shape[:2], dtype=np.float64) - 1.0) / 2.0
    return _affine(x, matrix, centre - matrix @ centre)


def shear_x(x, v, rng=None):
    return _centered(x, np.array([[1.0, 0.0], [v, 1.0]]))


def shear_y(x, v, rng=None):
    return _centered(x, np.array([[1.0, v], [0.0, 1.0]]))


def translate_x(x, v, rng=None):
    return _affine(x, np.eye(2), np.array([0.0, -v * x.shape[1]]))


def translate_y(x, v, rng=None):
    return _affine(x, np.eye(2), np.array([-v * x.shape[0], 0.0]))


def rotate(x, degrees, rng=None):
    a = np.deg2rad(degrees)
    # output->input rotation in (row, col) coordinates
    return _centered(x, np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]))


def flip_lr(x, v=0.0, rng=None):
    return x[:, ::-1, :].copy()


def auto_contrast(x, v=0.0, rng=None):
    lo = x.min(axis=(0, 1), keepdims=True)
    hi = x.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, x)


def invert(x, v=0.0, rng=None):
    return 1.0 - x


def equalize(x, v=0.0, rng=None):
    out = np.empty_like(x)
    for ch in range(x.shape[2]):
        levels = np.clip(np.round(x[..., ch] * 255.0), 0, 255).astype(np.intp)
        hist = np.bincount(levels.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        nonzero = cdf[hist > 0]
        lo = nonzero[0]
        total = cdf[-1]
        if total == lo:
            out[..., ch] = x[..., ch]
            continue
        lut = (cdf - lo) / (total - lo)
        out[..., ch] = np.clip(lut[levels], 0.0, 1.0)
    return out


def solarize(x, threshold, rng=None):
    return np.where(x >= threshold, 1.0 - x, x)


def posterize(x, bits, rng=None):
    levels = 2 ** int(round(bits))
    q = np.floor(np.clip(x, 0.0, 1.0) * 255.0 / 256.0 * levels)
    return q / (levels - 1) if levels > 1 else np.zeros_like(x)


def _blend(degenerate, x, factor):
    return degenerate + factor * (x - degenerate)


def _gray(x):
    if x.shape[2] == 3:
        return (x @ np.array([0.299, 0.587, 0.114]))[..., None]
    return x.mean(axis=2, keepdims=True)


def contrast(x, v, rng=None):
    return _blend(np.full_like(x, _gray(x).mean()), x, 1.0 + v)


def color(x, v, rng=None):
    return _blend(np.broadcast_to(_gray(x), x.shape), x, 1.0 + v)


def brightness(x, v, rng=None):
    return x + v


def sharpness(x, v, rng=None):
    kernel = np.array([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]]) / 13.0
    smooth = x.copy()
    for ch in range(x.shape[2]):
        blurred = ndimage.convolve(x[..., ch], kernel, mode="nearest")
        smooth[1:-1, 1:-1, ch] = blurred[1:-1, 1:-1]
    return _blend(smooth, x, 1.0 + v)


def cutout(x, frac, rng=None):
    h, w = x.shape[:2]
    side = int(round(frac * min(h, w)))
    if side <= 0:
        return x.copy()
    rng = rng if rng is not None else np.random.default_rng(0)
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    out = x.copy()
    out[max(cy - side // 2, 0):cy + (side + 1) // 2, max(cx - side // 2, 0):cx + (side + 1) // 2, :] = 0.5
    return out


def _op(name, fn, rng_=(0.0, 0.0), signed=False, uses=True):
    return AugmentOp(name, uses, rng_, signed, fn)


REGISTRY: dict[str, AugmentOp] = {op.name: op for op in [
    _op("shear-x", shear_x, (0.0, 0.3), signed=True),
    _op("shear-y", shear_y, (0.0, 0.3), signed=True),
    _op("translate-x", translate_x, (0.0, 0.45), signed=True),
    _op("translate-y", translate_y, (0.0, 0.45), signed=True),
    _op("rotate", rotate, (0.0, 30.0), signed=True),
    _op("auto-contrast", auto_contrast, uses=False),
    _op("invert", invert, uses=False),
    _op("equalize", equalize, uses=False),
    _op("solarize", solarize, (1.0, 0.0)),
    _op("posterize", posterize, (8.0, 4.0)),
    _op("contrast", contrast, (0.0, 0.9), signed=True),
    _op("color", color, (0.0, 0.9), signed=True),
    _op("brightness", brightness, (0.0, 0.45), signed=True),
    _op("sharpness", sharpness, (0.0, 0.9), signed=True),
    _op("cutout", cutout, (0.0, 0.6)),
]}

# flip is not part of the default search space but is handy for small tests
EXTRA_OPS: dict[str, AugmentOp] = {"flip-lr": _op("flip-lr", flip_lr, uses=False)}

DEFAULT_OPS: tuple[str, ...] = tuple(REGISTRY)


def get_op(name: str) -> AugmentOp:
    op = REGISTRY.get(name) or EXTRA_OPS.get(name)
    if op is None:
        raise KeyError(f"unknown augmentation op {name!r}")
    return op


def _check_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3 or x.size == 0:
        raise ValueError(f"expected a non-empty (H, W, C) image, got shape {x.shape}")
    return x


def apply_op(op: AugmentOp | str, x, m01: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``op`` at normalised magnitude ``m01``; output is clamped to [0, 1]."""
    op = get_op(op) if isinstance(op, str) else op
    x = _check_image(x)
    if not 0.0 <= m01 <= 1.0:
        raise ValueError(f"magnitude {m01} outside [0, 1]")
    value = op.native(m01)
    if op.signed and rng is not None and rng.random() < 0.5:
        value = -value
    return np.clip(op.fn(x, value, rng), 0.0, 1.0)


def apply_subpolicy(ops: Sequence[str], x, bits: Sequence, mags: Sequence[float],
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply slot ``i`` only when ``bits[i]`` is set; slot 0 runs first."""
    if not len(ops) == len(bits) == len(mags):
        raise ValueError("ops, bits and magnitudes must have the same length")
    x = _check_image(x)
    for name, b, m in zip(ops, bits, mags):
        if b:
            x = apply_op(name, x, float(m), rng)
    return x


def magnitude_grad(dl_dxhat) -> float:
    """Straight-through magnitude gradient: every augmented pixel has slope 1 in m."""
    return float(np.sum(dl_dxhat))
