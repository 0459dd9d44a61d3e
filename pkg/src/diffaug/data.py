"""Datasets: IDX / CSV ingestion, the synthetic rotor set, reduce-and-split."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

IDX_UBYTE = 0x08


@dataclass
class Dataset:
    images: np.ndarray      # (n, H, W, C) float64 in [0, 1]
    labels: np.ndarray      # (n,) int64
    class_count: int
    name: str = "dataset"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixels outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index, name: str | None = None, **prov) -> "Dataset":
        index = np.asarray(index, dtype=np.intp)
        return Dataset(self.images[index], self.labels[index], self.class_count,
                       name or self.name, {**self.provenance, **prov})


# ---------------------------------------------------------------- IDX

def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != IDX_UBYTE or ndim == 0:
        raise ValueError(f"{path}: bad IDX magic 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise ValueError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def _write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, IDX_UBYTE, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(path_images, path_labels, name: str | None = None, class_count: int | None = None) -> Dataset:
    """Images: magic 0x00000803 (n, rows, cols) or 0x00000804 (n, rows, cols, channels)."""
    images = _read_idx(path_images)
    labels = _read_idx(path_labels)
    if images.ndim not in (3, 4):
        raise ValueError(f"{path_images}: expected a 3- or 4-dimensional image file")
    if labels.ndim != 1:
        raise ValueError(f"{path_labels}: expected a 1-dimensional label file")
    if len(images) != len(labels):
        raise ValueError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    class_count = class_count or (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), class_count,
                   name or Path(path_images).stem, {"source": str(path_images)})


def export_idx(ds: Dataset, path_images, path_labels) -> None:
    pixels = np.round(ds.images * 255.0)
    if ds.images.shape[-1] == 1:
        pixels = pixels[..., 0]
    _write_idx(path_images, pixels)
    _write_idx(path_labels, ds.labels)


def load_csv(path, image_shape: tuple | None = None, class_count: int | None = None) -> Dataset:
    """Rows of ``label,p0,p1,...`` with pixels in 0..255; square grayscale unless ``image_shape``."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    labels = rows[:, 0].astype(np.int64)
    pixels = rows[:, 1:] / 255.0
    if image_shape is None:
        side = int(round(np.sqrt(pixels.shape[1])))
        if side * side != pixels.shape[1]:
            raise ValueError("cannot infer a square image shape; pass image_shape")
        image_shape = (side, side, 1)
    class_count = class_count or int(labels.max()) + 1
    return Dataset(pixels.reshape((len(rows),) + tuple(image_shape)), labels, class_count,
                   Path(path).stem, {"source": str(path)})


def write_provenance(ds: Dataset, path) -> None:
    doc = {"name": ds.name, "count": len(ds), "class_count": ds.class_count,
           "image_shape": list(ds.image_shape), **ds.provenance}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- dataset directories

def save_dataset_dir(path, train: Dataset, test: Dataset | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    export_idx(train, path / "train-images.idx", path / "train-labels.idx")
    write_provenance(train, path / "train-provenance.json")
    if test is not None:
        export_idx(test, path / "test-images.idx", path / "test-labels.idx")
        write_provenance(test, path / "test-provenance.json")


def load_dataset_dir(path) -> tuple[Dataset, Dataset | None]:
    path = Path(path)
    if not (path / "train-images.idx").exists():
        raise FileNotFoundError(f"{path}: no train-images.idx")
    train = load_idx(path / "train-images.idx", path / "train-labels.idx", name=f"{path.name}-train")
    test = None
    if (path / "test-images.idx").exists():
        test = load_idx(path / "test-images.idx", path / "test-labels.idx", name=f"{path.name}-test",
                        class_count=train.class_count)
    return train, test


# ---------------------------------------------------------------- synthetic rotor set

ROTOR_DEFAULTS = {"freqs": (1.8, 2.5), "noise": 0.5, "angle_range": 180.0, "noise_blur": 0.7}


def synth_rotor(n: int, size: int = 16, seed: int = 0, freqs=(1.8, 2.5), noise: float = 0.5,
                angle_range: float = 180.0, noise_blur: float = 0.7) -> Dataset:
    """Two-class grating textures seen through a round window on a black background.

    The class is the grating frequency (cycles across the image).  Each image
    gets a random orientation in ``[-angle_range/2, angle_range/2)`` degrees,
    a random phase and contrast, and Gaussian noise inside the window, so the
    label is rotation invariant and a rotated image (black fill outside the
    window) is still a plausible draw.  The noise is smoothed with a
    Gaussian of width ``noise_blur`` pixels so that interpolation in the
    geometric ops does not by itself change the image statistics.
    """
    if size < 8:
        raise ValueError("size must be at least 8")
    if n < 2:
        raise ValueError("need at least two images")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    coords = np.arange(size) - (size - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    radius = np.hypot(yy, xx) / (size / 2.0)
    window = np.clip((0.95 - radius) / 0.2, 0.0, 1.0)
    theta = np.deg2rad(rng.uniform(-angle_range / 2.0, angle_range / 2.0, size=n))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n)
    amp = rng.uniform(0.25, 0.45, size=n)
    freq = np.asarray(freqs, dtype=np.float64)[labels]
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    wave = np.cos(2.0 * np.pi * freq[:, None, None] * proj / size + phase[:, None, None])
    grain = rng.normal(size=(n, size, size))
    if noise_blur > 0:
        grain = ndimage.gaussian_filter(grain, (0, noise_blur, noise_blur))
        grain /= grain.std()
    img = window * (0.5 + amp[:, None, None] * wave + noise * grain)
    images = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(images[..., None], labels, 2, "synth_rotor",
                   {"source": "synth_rotor", "seed": seed, "n": n, "size": size,
                    "freqs": list(freqs), "noise": noise, "angle_range": angle_range,
                    "noise_blur": noise_blur})


# ---------------------------------------------------------------- reduce and split

def _content_key(img: np.ndarray) -> bytes:
    return hashlib.sha1(np.ascontiguousarray(img).tobytes()).digest()


def reduce_and_split(ds: Dataset, n_reduced: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified subsample of ``n_reduced`` items split into disjoint halves.

    Items are ordered by (label, content hash) before sampling, so the result
    does not depend on the order of ``ds``.
    """
    if n_reduced > len(ds):
        raise ValueError(f"n_reduced={n_reduced} exceeds dataset size {len(ds)}")
    if n_reduced < 2:
        raise ValueError("n_reduced must be at least 2")
    rng = np.random.default_rng(seed)
    order = sorted(range(len(ds)), key=lambda i: (int(ds.labels[i]), _content_key(ds.images[i])))
    order = np.asarray(order, dtype=np.intp)
    classes = np.unique(ds.labels)
    counts = np.array([np.sum(ds.labels == c) for c in classes])
    quota = n_reduced * counts / len(ds)
    take = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - take), kind="stable")[: n_reduced - take.sum()]:
        take[i] += 1
    train_idx, val_idx = [], []
    extra_to_train = True
    for c, m in zip(classes, take):
        members = order[ds.labels[order] == c]
        chosen = members[rng.permutation(len(members))[:m]]
        half = m // 2 + (m % 2 if extra_to_train else 0)
        if m % 2:
            extra_to_train = not extra_to_train
        train_idx.extend(chosen[:half])
        val_idx.extend(chosen[half:])
    prov = {"reduced_from": ds.name, "n_reduced": n_reduced, "split_seed": seed}
    return (ds.subset(train_idx, f"{ds.name}-train", split="train", **prov),
            ds.subset(val_idx, f"{ds.name}-val", split="val", **prov))
