"""Synthetic and IDX datasets for the proxy -> target protocol."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError

KINDS = ("synthetic-blobs", "synthetic-moons", "idx-file")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Transform:
    """Domain shift applied to a generated dataset."""

    rotation_deg: float = 0.0
    shift: tuple[float, ...] | float = 0.0
    label_noise: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.label_noise <= 1.0:
            raise ConfigError(f"label_noise must lie in [0, 1], got {self.label_noise}")
        if not np.isscalar(self.shift):
            object.__setattr__(self, "shift", tuple(float(s) for s in self.shift))


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic-blobs"
    n_samples: int = 2000
    n_features: int = 16
    n_classes: int = 4
    seed: int = 0
    transform: Transform | None = None
    # blobs: centers come from their own seed so proxy and target share them
    centers_seed: int = 1234
    separation: float = 4.0
    cluster_std: float = 1.0
    # moons
    noise: float = 0.1
    # idx-file
    path: str | None = None
    labels_path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "idx-file":
            if not self.path or not self.labels_path:
                raise ConfigError("idx-file datasets need both 'path' and 'labels_path'")
            return
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.n_samples < 1 or self.n_features < 1:
            raise ConfigError("n_samples and n_features must be positive")
        if self.kind == "synthetic-moons" and (self.n_classes != 2 or self.n_features < 2):
            raise ConfigError("moons are 2-class with at least 2 features")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def batch(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X, self.y

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.n_classes, dict(self.meta))


def blob_centers(spec: DatasetSpec) -> np.ndarray:
    """Class centers whose expected pairwise distance is ``separation`` stds."""
    rng = np.random.default_rng(spec.centers_seed)
    c = rng.standard_normal((spec.n_classes, spec.n_features))
    return c * (spec.separation * spec.cluster_std / np.sqrt(2.0 * spec.n_features))


def _rotate(X: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0.0 or X.shape[1] < 2:
        return X
    t = np.deg2rad(degrees)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    out = X.copy()
    out[:, :2] = X[:, :2] @ rot.T
    return out


def apply_transform(ds: Dataset, tf: Transform, rng: np.random.Generator) -> Dataset:
    X = _rotate(ds.X, tf.rotation_deg)
    shift = np.broadcast_to(np.asarray(tf.shift, dtype=float), (X.shape[1],))
    if np.any(shift != 0):
        X = X + shift
    y = ds.y
    if tf.label_noise > 0:
        y = y.copy()
        flip = rng.random(len(y)) < tf.label_noise
        # replace with a uniformly drawn *different* class
        offsets = rng.integers(1, ds.n_classes, size=len(y))
        y[flip] = (y[flip] + offsets[flip]) % ds.n_classes
    return Dataset(X, y, ds.n_classes, dict(ds.meta))


def gen_synthetic(spec: DatasetSpec) -> Dataset:
    """Deterministic synthetic dataset; one RNG stream for samples, one for label noise."""
    sample_seq, noise_seq = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(sample_seq)
    n, f, k = spec.n_samples, spec.n_features, spec.n_classes
    if spec.kind == "synthetic-blobs":
        centers = blob_centers(spec)
        y = rng.integers(0, k, size=n)
        X = centers[y] + spec.cluster_std * rng.standard_normal((n, f))
    elif spec.kind == "synthetic-moons":
        y = rng.integers(0, 2, size=n)
        t = rng.uniform(0.0, np.pi, size=n)
        X = np.zeros((n, f))
        X[:, 0] = np.where(y == 0, np.cos(t), 1.0 - np.cos(t))
        X[:, 1] = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
        X[:, :2] += spec.noise * rng.standard_normal((n, 2))
    else:
        raise ConfigError("idx-file datasets are loaded with load_idx, not generated")
    ds = Dataset(X, y.astype(np.int64), k, {"kind": spec.kind, "seed": spec.seed})
    if spec.transform is not None:
        ds = apply_transform(ds, spec.transform, np.random.default_rng(noise_seq))
    return ds


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated at offset {len(raw)} (need 4-byte magic)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated at offset {len(raw)} inside the dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) < header_end + count:
        raise FormatError(f"{path}: truncated at offset {len(raw)}; "
                          f"expected {header_end + count} bytes for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(path, labels_path, n_classes: int | None = None) -> Dataset:
    """Read an IDX image file and its label file; pixels scaled to [0, 1]."""
    images = _read_idx(Path(path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    k = n_classes if n_classes is not None else int(y.max()) + 1 if len(y) else 0
    return Dataset(X, y, k, {"kind": "idx-file", "path": str(path)})


def write_idx(images: np.ndarray, labels: Sequence[int], path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "idx-file":
        return load_idx(spec.path, spec.labels_path, spec.n_classes)
    return gen_synthetic(spec)


def validate_labels(ds: Dataset, n_classes: int) -> None:
    if len(ds.y) and (ds.y.min() < 0 or ds.y.max() >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes}); found range "
                          f"[{ds.y.min()}, {ds.y.max()}]")


def canonical_order(ds: Dataset) -> Dataset:
    """Sort samples by (features, label) so results ignore input order."""
    keys = [ds.y] + [ds.X[:, j] for j in range(ds.X.shape[1] - 1, -1, -1)]
    return ds.subset(np.lexsort(keys))


def split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random split; the second part holds ``fraction`` of the samples."""
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_second = int(round(n * fraction))
    return ds.subset(np.sort(perm[n_second:])), ds.subset(np.sort(perm[:n_second]))
