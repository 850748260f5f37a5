"""Dataset ingestion: IDX (MNIST-format) files and a built-in synthetic digit set.

Both sources produce uint8 images ``[N, 28, 28]`` that are normalised with
the MNIST statistics below before reaching the model.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicNumber, CountMismatch, UnknownDataset

PIXEL_MEAN = 0.1307
PIXEL_STD = 0.3081

IDX_UBYTE = 0x08
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Split:
    images: np.ndarray  # float32 [N, 1, H, W], normalised
    labels: np.ndarray  # int64 [N]
    attributes: np.ndarray | None = None  # per-sample generator attribute (synthetic only)

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = False):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        stop = len(self) - (len(self) % batch_size if drop_last else 0)
        for i in range(0, stop, batch_size):
            idx = order[i : i + batch_size]
            yield self.images[idx], self.labels[idx]

    def subset(self, n: int) -> "Split":
        attrs = None if self.attributes is None else self.attributes[:n]
        return Split(self.images[:n], self.labels[:n], attrs)


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int = 10


def normalize(images_u8: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32) / 255.0
    return ((x - PIXEL_MEAN) / PIXEL_STD)[:, None].astype(np.float32)


# ---------------------------------------------------------------- IDX format


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise BadMagicNumber(f"{path}: file too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != IDX_UBYTE or ndim < 1:
        raise BadMagicNumber(f"{path}: magic 0x{struct.unpack('>I', raw[:4])[0]:08x} is not an unsigned-byte IDX header")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise CountMismatch(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise CountMismatch(f"{path}: header declares {expected} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> Path:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack(">HBB", 0, IDX_UBYTE, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(header + arr.tobytes())
    return path


def read_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise BadMagicNumber(f"{images_path}: expected a 3-D image file (magic 0x{IDX_IMAGES_MAGIC:08x})")
    if labels.ndim != 1:
        raise BadMagicNumber(f"{labels_path}: expected a 1-D label file (magic 0x{IDX_LABELS_MAGIC:08x})")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


# ---------------------------------------------------------------- synthetic digits

def _arc(cx, cy, rx, ry, a0, a1, n=10):
    a = np.linspace(np.radians(a0), np.radians(a1), n)
    return np.stack([cx + rx * np.cos(a), cy + ry * np.sin(a)], axis=1)


# Polylines in a unit box, x to the right and y downwards.
_GLYPHS = {
    0: [_arc(0.5, 0.5, 0.28, 0.4, 0, 360, 20)],
    1: [np.array([[0.35, 0.25], [0.55, 0.1], [0.55, 0.9]]), np.array([[0.38, 0.9], [0.72, 0.9]])],
    2: [np.vstack([_arc(0.5, 0.32, 0.26, 0.22, 190, 360, 8), [[0.72, 0.45], [0.25, 0.9], [0.78, 0.9]]])],
    3: [_arc(0.48, 0.3, 0.25, 0.2, 200, 450, 10), _arc(0.48, 0.69, 0.28, 0.21, -90, 160, 10)],
    4: [np.array([[0.62, 0.1], [0.22, 0.65], [0.8, 0.65]]), np.array([[0.62, 0.35], [0.62, 0.92]])],
    5: [np.array([[0.75, 0.1], [0.3, 0.1], [0.27, 0.45]]), _arc(0.48, 0.66, 0.27, 0.24, -120, 150, 10)],
    6: [np.vstack([[[0.68, 0.1]], _arc(0.5, 0.66, 0.25, 0.24, 200, 560, 16)])],
    7: [np.array([[0.22, 0.1], [0.78, 0.1], [0.42, 0.92]]), np.array([[0.38, 0.5], [0.66, 0.5]])],
    8: [_arc(0.5, 0.29, 0.2, 0.19, 0, 360, 14), _arc(0.5, 0.7, 0.26, 0.21, 0, 360, 16)],
    9: [np.vstack([_arc(0.5, 0.33, 0.24, 0.23, 20, 380, 16), [[0.72, 0.4], [0.6, 0.92]]])],
}


def _segments(label: int) -> np.ndarray:
    segs = []
    for line in _GLYPHS[label]:
        segs.extend(np.stack([line[:-1], line[1:]], axis=1))
    return np.asarray(segs)  # [S, 2, 2]


def render_digits(labels: np.ndarray, rng: np.random.Generator, size: int = 28, noise: np.ndarray | float = 0.1) -> np.ndarray:
    """Render randomly deformed stroke digits as uint8 images ``[N, size, size]``."""
    n = len(labels)
    noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), (n,))
    coords = (np.arange(size) + 0.5) / size
    px = np.stack(np.meshgrid(coords, coords, indexing="xy"), axis=-1).reshape(-1, 2)  # [P, 2] as (x, y)
    out = np.empty((n, size, size), dtype=np.uint8)
    for i, label in enumerate(labels):
        segs = _segments(int(label)) - 0.5
        angle = np.radians(rng.uniform(-12, 12))
        scale = rng.uniform(0.7, 0.95)
        aspect = rng.uniform(0.85, 1.15)
        shear = rng.uniform(-0.2, 0.2)
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        affine = rot @ np.array([[scale * aspect, shear * scale], [0.0, scale]])
        shift = 0.5 + rng.uniform(-0.08, 0.08, size=2)
        segs = segs @ affine.T + shift
        a, b = segs[:, 0], segs[:, 1]
        ab = b - a
        denom = np.maximum((ab * ab).sum(-1), 1e-12)
        ap = px[:, None, :] - a[None]
        t = np.clip((ap * ab[None]).sum(-1) / denom[None], 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        dist = np.sqrt(((px[:, None, :] - closest) ** 2).sum(-1)).min(axis=1)
        width = rng.uniform(0.035, 0.06)
        ink = np.clip((width - dist) / (1.5 / size) + 0.5, 0.0, 1.0)
        ink = ink * rng.uniform(0.75, 1.0)
        ink = ink + rng.normal(0.0, noise[i], size=ink.shape)
        out[i] = np.clip(ink * 255.0, 0, 255).reshape(size, size).astype(np.uint8)
    return out


def synthetic_digits(n: int, seed: int, noise_levels=(0.1,), size: int = 28):
    """``n`` labelled synthetic digits; each sample draws its noise level from ``noise_levels``.

    Returns ``(images_u8, labels, noise_index)``; the noise index is the
    visible attribute that controls how separable a sample is.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    which = rng.integers(0, len(noise_levels), size=n)
    noise = np.asarray(noise_levels, dtype=np.float64)[which]
    images = render_digits(labels, rng, size=size, noise=noise)
    return images, labels.astype(np.int64), which


def _split_indices(n: int, sizes: tuple, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(sizes)
    return np.split(order, bounds[:-1])


def ingest_dataset(spec: dict) -> Dataset:
    """Build train/val/test splits from a dataset spec.

    ``{"name": "synthetic", "n_train", "n_val", "n_test", "seed", "noise_levels"}``
    or ``{"name": "idx", "images", "labels", "test_images"?, "test_labels"?, "n_val", "seed"}``.
    """
    name = spec.get("name")
    seed = int(spec.get("seed", 0))
    if name == "synthetic":
        sizes = (int(spec.get("n_train", 20000)), int(spec.get("n_val", 1000)), int(spec.get("n_test", 2000)))
        images, labels, attrs = synthetic_digits(sum(sizes), seed, tuple(spec.get("noise_levels", (0.1,))))
        parts = _split_indices(len(labels), sizes, seed + 1)
        splits = [Split(normalize(images[p]), labels[p], attrs[p]) for p in parts]
        return Dataset(*splits)
    if name == "idx":
        images, labels = read_idx_pair(spec["images"], spec["labels"])
        n_val = int(spec.get("n_val", 1000))
        if spec.get("test_images"):
            t_images, t_labels = read_idx_pair(spec["test_images"], spec["test_labels"])
            n_train = int(spec.get("n_train", len(labels) - n_val))
            if n_train + n_val > len(labels):
                raise CountMismatch(f"asked for {n_train}+{n_val} samples from {len(labels)}")
            train_idx, val_idx = _split_indices(len(labels), (n_train, n_val), seed + 1)[:2]
            n_test = int(spec.get("n_test", len(t_labels)))
            test = Split(normalize(t_images[:n_test]), t_labels[:n_test].astype(np.int64))
        else:
            n_test = int(spec.get("n_test", 1000))
            n_train = int(spec.get("n_train", len(labels) - n_val - n_test))
            if n_train + n_val + n_test > len(labels):
                raise CountMismatch(f"asked for {n_train}+{n_val}+{n_test} samples from {len(labels)}")
            train_idx, val_idx, test_idx = _split_indices(len(labels), (n_train, n_val, n_test), seed + 1)[:3]
            test = Split(normalize(images[test_idx]), labels[test_idx].astype(np.int64))
        train = Split(normalize(images[train_idx]), labels[train_idx].astype(np.int64))
        val = Split(normalize(images[val_idx]), labels[val_idx].astype(np.int64))
        return Dataset(train, val, test, int(labels.max()) + 1 if len(labels) else 10)
    raise UnknownDataset(f"unknown dataset {name!r}; expected 'synthetic' or 'idx'")
