"""Synthetic hierarchical datasets and their on-disk format.

A dataset directory holds::

    meta.json       {"num_samples", "input_shape", "level_sizes", "format_version"}
    data.f32        little-endian float32 inputs, row-major
    labels.u32      little-endian uint32 labels, N x h row-major
    hierarchy.json  the label tree
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError
from .hierarchy import TreeHierarchy, balanced, hierarchy_from_dict, load_hierarchy

FORMAT_VERSION = 1
_META_KEYS = {"num_samples", "input_shape", "level_sizes", "format_version"}


@dataclass
class Dataset:
    inputs: np.ndarray   # N x input_shape, float32
    labels: np.ndarray   # N x h, int64
    hierarchy: TreeHierarchy

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2 or len(self.labels) != len(self.inputs):
            raise DataError(f"labels {self.labels.shape} do not match {len(self.inputs)} inputs")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_shape(self) -> list[int]:
        return list(self.inputs.shape[1:])

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.hierarchy)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.inputs[idx], self.labels[idx]


def validate_labels(labels: np.ndarray, th: TreeHierarchy) -> None:
    """Raise :class:`DataError` naming the first sample whose label path leaves the tree."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[1] != th.depth:
        raise DataError(f"labels must be N x {th.depth}, got shape {labels.shape}")
    for lv in range(1, th.depth + 1):
        col = labels[:, lv - 1]
        bad = np.flatnonzero((col < 0) | (col >= th.size(lv)))
        if bad.size:
            raise DataError(f"label out of range, sample {int(bad[0])}, level {lv}")
    for lv in range(2, th.depth + 1):
        bad = np.flatnonzero(th.parent_map(lv)[labels[:, lv - 1]] != labels[:, lv - 2])
        if bad.size:
            raise DataError(f"inconsistent label path, sample {int(bad[0])}, level {lv}")


def validate_dataset(ds: Dataset) -> None:
    validate_labels(ds.labels, ds.hierarchy)
    if not np.isfinite(ds.inputs).all():
        bad = int(np.flatnonzero(~np.isfinite(ds.inputs.reshape(len(ds), -1)).all(axis=1))[0])
        raise DataError(f"non-finite input, sample {bad}")


# -- synthetic generation ---------------------------------------------------
@dataclass
class SynthSpec:
    """Hierarchical Gaussian mixture recipe.

    Give the tree either as ``balanced`` branching factors or as a
    ``hierarchy`` document.  Top-level centres have spread ``sigma_between``;
    each deeper level's offsets shrink by ``level_shrink``; samples scatter
    around their leaf centre with ``sigma_within``.
    """

    balanced: list[int] | None = None
    hierarchy: dict | None = None
    samples_per_leaf: int = 20
    input_mode: str = "vector"
    feature_dim: int = 16
    image_shape: list[int] = field(default_factory=lambda: [3, 32, 32])
    sigma_between: float = 1.0
    sigma_within: float = 0.1
    level_shrink: float = 0.5
    noise: float = 0.05
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if (self.balanced is None) == (self.hierarchy is None):
            raise ConfigError("exactly one of 'balanced' or 'hierarchy' must be given")
        if self.samples_per_leaf < 1:
            raise ConfigError(f"samples_per_leaf must be >= 1, got {self.samples_per_leaf}")
        if self.input_mode not in ("vector", "image"):
            raise ConfigError(f"input_mode must be 'vector' or 'image', got {self.input_mode!r}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.input_mode == "image" and (len(self.image_shape) != 3 or min(self.image_shape) < 1):
            raise ConfigError(f"image_shape must be [C, H, W], got {self.image_shape}")
        for name in ("sigma_between", "sigma_within", "level_shrink"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be > 0, got {value}")
        if not (math.isfinite(self.noise) and self.noise >= 0):
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**obj)

    def build_hierarchy(self) -> TreeHierarchy:
        if self.balanced is not None:
            if not self.balanced or any(int(b) < 1 for b in self.balanced):
                raise ConfigError(f"balanced branching factors must be positive, got {self.balanced}")
            return balanced(*[int(b) for b in self.balanced])
        return hierarchy_from_dict(self.hierarchy)


def _image_basis(count: int, shape: list[int]) -> np.ndarray:
    """``count`` fixed low-frequency cosine patterns of the given image shape."""
    c, h, w = shape
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    freqs = [(fy, fx) for total in range(1, 8) for fy in range(total + 1) for fx in [total - fy]]
    basis = np.zeros((count, c, h, w))
    for k in range(count):
        fy, fx = freqs[(k // c) % len(freqs)]
        pattern = np.outer(np.cos(np.pi * fy * ys), np.cos(np.pi * fx * xs))
        basis[k, k % c] = pattern
    return basis


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, TreeHierarchy]:
    """Sample a dataset whose labels are the generating tree paths."""
    th = spec.build_hierarchy()
    rng = np.random.default_rng(spec.seed)
    dim = spec.feature_dim
    centres = rng.normal(0.0, spec.sigma_between, size=(th.size(1), dim))
    spread = spec.sigma_between
    for lv in range(2, th.depth + 1):
        spread *= spec.level_shrink
        parent = th.parent_map(lv)
        centres = centres[parent] + rng.normal(0.0, spread, size=(th.size(lv), dim))

    paths = th.ancestors_of_leaves()
    leaves = np.repeat(np.arange(th.size(th.depth)), spec.samples_per_leaf)
    if leaves.size == 0:
        raise ConfigError("synthetic spec produces no samples")
    latent = centres[leaves] + rng.normal(0.0, spec.sigma_within, size=(leaves.size, dim))
    labels = paths[leaves]

    if spec.input_mode == "vector":
        inputs = latent
    else:
        basis = _image_basis(dim, spec.image_shape)
        inputs = np.tensordot(latent, basis, axes=(1, 0))
        if spec.noise > 0:
            inputs = inputs + rng.normal(0.0, spec.noise, size=inputs.shape)
    return Dataset(inputs, labels, th), th


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random split; the test part gets ``round(N * test_fraction)`` samples."""
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


# -- on-disk format ---------------------------------------------------------
def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_samples": len(ds),
        "input_shape": ds.input_shape,
        "level_sizes": list(ds.hierarchy.level_sizes),
        "format_version": FORMAT_VERSION,
    }
    (directory / "meta.json").write_text(json.dumps(meta), encoding="utf-8")
    (directory / "data.f32").write_bytes(ds.inputs.astype("<f4").tobytes())
    (directory / "labels.u32").write_bytes(ds.labels.astype("<u4").tobytes())
    ds.hierarchy.save(directory / "hierarchy.json")
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"dataset meta.json not found in {directory}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    unknown = set(meta) - _META_KEYS
    missing = _META_KEYS - set(meta)
    if unknown or missing:
        raise DataError(f"meta.json: unknown keys {sorted(unknown)}, missing keys {sorted(missing)}")
    if meta["format_version"] != FORMAT_VERSION:
        raise DataError(f"meta.json: unsupported format_version {meta['format_version']}")
    n = int(meta["num_samples"])
    shape = [int(v) for v in meta["input_shape"]]
    th = load_hierarchy(directory / "hierarchy.json")
    if list(th.level_sizes) != list(meta["level_sizes"]):
        raise DataError(f"meta.json level_sizes {meta['level_sizes']} != hierarchy {list(th.level_sizes)}")

    raw = _read(directory / "data.f32")
    expected = 4 * n * int(np.prod(shape))
    if len(raw) != expected:
        raise DataError(f"data.f32: expected {expected} bytes, found {len(raw)}")
    raw_labels = _read(directory / "labels.u32")
    expected = 4 * n * th.depth
    if len(raw_labels) != expected:
        raise DataError(f"labels.u32: expected {expected} bytes, found {len(raw_labels)}")

    inputs = np.frombuffer(raw, dtype="<f4").reshape([n] + shape)
    labels = np.frombuffer(raw_labels, dtype="<u4").reshape(n, th.depth).astype(np.int64)
    ds = Dataset(inputs, labels, th)
    validate_dataset(ds)
    return ds


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing dataset file {path}") from None
