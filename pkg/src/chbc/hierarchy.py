"""Label tree hierarchies and the adjacency matrices between their levels.

Levels are numbered ``1..h`` from coarsest to finest; node indices inside a
level are 0-based.  The root is implicit: level 1 holds the top superclasses.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ChildlessNodeError,
    ConfigError,
    DataError,
    DepthError,
    ParameterError,
    ParentIndexError,
)

_SCHEMA_KEYS = {"level_sizes", "parents", "names"}


@dataclass(frozen=True, eq=False)
class TreeHierarchy:
    """Validated tree over ``h >= 2`` label levels.

    ``parents[k]`` maps each node of level ``k + 2`` to its parent in level
    ``k + 1``.  Instances are immutable; adjacency matrices are cached lazily.
    """

    level_sizes: tuple[int, ...]
    parents: tuple[np.ndarray, ...]
    names: tuple[tuple[str, ...], ...] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def depth(self) -> int:
        return len(self.level_sizes)

    def size(self, level: int) -> int:
        self._check_level(level)
        return self.level_sizes[level - 1]

    def parent_map(self, level: int) -> np.ndarray:
        """Parent indices (into ``level - 1``) for every node of ``level >= 2``."""
        if not 2 <= level <= self.depth:
            raise ParameterError(f"level {level} has no parent map (valid: 2..{self.depth})")
        return self.parents[level - 2]

    def _check_level(self, level: int) -> None:
        if not 1 <= level <= self.depth:
            raise ParameterError(f"level {level} out of range 1..{self.depth}")

    def adjacency(self, i: int, j: int) -> np.ndarray:
        """Integer matrix ``D_{i,j}`` of shape ``c_i x c_j``.

        ``D[a, e] == 1`` exactly when node ``a`` of level ``i`` is the ancestor of
        node ``e`` of level ``j``.  Longer spans are chained products of the
        one-step matrices.
        """
        if not i < j:
            raise ParameterError(f"adjacency needs i < j, got i={i}, j={j}")
        self._check_level(i)
        self._check_level(j)
        key = (i, j)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        if j == i + 1:
            pm = self.parents[i - 1]
            mat = np.zeros((self.level_sizes[i - 1], self.level_sizes[j - 1]), dtype=np.int64)
            mat[pm, np.arange(pm.size)] = 1
        else:
            mat = self.adjacency(i, j - 1) @ self.adjacency(j - 1, j)
        mat.setflags(write=False)
        with self._lock:
            return self._cache.setdefault(key, mat)

    def ancestor(self, index: int, level: int, target_level: int) -> int:
        """Index of the level-``target_level`` ancestor of node ``index`` at ``level``."""
        self._check_level(level)
        if not 1 <= target_level < level:
            raise ParameterError(f"target level {target_level} must lie in 1..{level - 1}")
        if not 0 <= index < self.level_sizes[level - 1]:
            raise ParameterError(f"node {index} out of range for level {level}")
        node = int(index)
        for lv in range(level, target_level, -1):
            node = int(self.parents[lv - 2][node])
        return node

    def ancestors_of_leaves(self) -> np.ndarray:
        """``c_h x h`` table whose row ``e`` is the full label path of leaf ``e``."""
        key = "paths"
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        h = self.depth
        paths = np.zeros((self.level_sizes[-1], h), dtype=np.int64)
        paths[:, h - 1] = np.arange(self.level_sizes[-1])
        for lv in range(h, 1, -1):
            paths[:, lv - 2] = self.parents[lv - 2][paths[:, lv - 1]]
        paths.setflags(write=False)
        with self._lock:
            return self._cache.setdefault(key, paths)

    def is_valid_path(self, path: Sequence[int]) -> bool:
        """True when ``path`` (one index per level) follows parent links top to bottom."""
        if len(path) != self.depth:
            return False
        for lv, idx in enumerate(path, start=1):
            if not 0 <= idx < self.level_sizes[lv - 1]:
                return False
        return all(int(self.parents[lv - 2][path[lv - 1]]) == path[lv - 2] for lv in range(2, self.depth + 1))

    def children_counts(self, level: int) -> np.ndarray:
        """Number of children (at ``level + 1``) for each node of ``level < h``."""
        return np.bincount(self.parent_map(level + 1), minlength=self.size(level))

    def to_dict(self) -> dict:
        out = {"level_sizes": list(self.level_sizes), "parents": [p.tolist() for p in self.parents]}
        if self.names is not None:
            out["names"] = [list(n) for n in self.names]
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    def __eq__(self, other) -> bool:
        if not isinstance(other, TreeHierarchy):
            return NotImplemented
        return (self.level_sizes == other.level_sizes
                and all(np.array_equal(a, b) for a, b in zip(self.parents, other.parents))
                and self.names == other.names)

    __hash__ = object.__hash__


def build_hierarchy(level_sizes: Sequence[int], parents: Sequence[Sequence[int]],
                    names: Sequence[Sequence[str]] | None = None) -> TreeHierarchy:
    """Validate raw level sizes and parent maps into a :class:`TreeHierarchy`."""
    sizes = tuple(int(c) for c in level_sizes)
    if len(sizes) < 2:
        raise DepthError(f"hierarchy depth must be >= 2, got {len(sizes)}")
    for lv, c in enumerate(sizes, start=1):
        if c < 1:
            raise DepthError(f"level {lv} must have at least one node, got {c}", level=lv)
    if len(parents) != len(sizes) - 1:
        raise DepthError(f"expected {len(sizes) - 1} parent maps for depth {len(sizes)}, got {len(parents)}")

    maps = []
    for k, pm in enumerate(parents):
        child_level = k + 2
        arr = np.asarray(pm)
        if arr.ndim != 1 or arr.size != sizes[k + 1]:
            raise ParentIndexError(
                f"level {child_level}: parent map has {arr.size} entries, expected {sizes[k + 1]}",
                level=child_level)
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            raise ParentIndexError(f"level {child_level}: parent indices must be integers", level=child_level)
        arr = arr.astype(np.int64)
        bad = np.flatnonzero((arr < 0) | (arr >= sizes[k]))
        if bad.size:
            e = int(bad[0])
            raise ParentIndexError(
                f"level {child_level}, node {e}: parent index {int(arr[e])} out of range [0, {sizes[k]})",
                level=child_level, index=e)
        counts = np.bincount(arr, minlength=sizes[k])
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            a = int(empty[0])
            raise ChildlessNodeError(f"level {k + 1}, node {a}: internal node has no children",
                                     level=k + 1, index=a)
        arr.setflags(write=False)
        maps.append(arr)

    name_tuple = None
    if names is not None:
        if len(names) != len(sizes) or any(len(n) != c for n, c in zip(names, sizes)):
            raise DataError("names must list one string per node at every level")
        name_tuple = tuple(tuple(str(s) for s in n) for n in names)
    return TreeHierarchy(sizes, tuple(maps), name_tuple)


def hierarchy_from_dict(obj: dict) -> TreeHierarchy:
    """Build from the JSON schema ``{"level_sizes", "parents", "names"?}``."""
    if not isinstance(obj, dict):
        raise DataError("hierarchy document must be a JSON object")
    unknown = set(obj) - _SCHEMA_KEYS
    if unknown:
        raise DataError(f"unknown hierarchy keys: {sorted(unknown)}")
    missing = {"level_sizes", "parents"} - set(obj)
    if missing:
        raise DataError(f"missing hierarchy keys: {sorted(missing)}")
    return build_hierarchy(obj["level_sizes"], obj["parents"], obj.get("names"))


def load_hierarchy(path: str | Path) -> TreeHierarchy:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"hierarchy file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return hierarchy_from_dict(obj)


def balanced(*branching: int) -> TreeHierarchy:
    """Tree with ``branching[0]`` top nodes and ``branching[k]`` children per node below."""
    if len(branching) < 2 or any(b < 1 for b in branching):
        raise ConfigError(f"balanced() needs >= 2 positive branching factors, got {branching}")
    sizes = [branching[0]]
    parents = []
    for b in branching[1:]:
        parents.append(np.repeat(np.arange(sizes[-1]), b))
        sizes.append(sizes[-1] * b)
    return build_hierarchy(sizes, parents)


def random_hierarchy(rng: np.random.Generator, level_sizes: Sequence[int]) -> TreeHierarchy:
    """Random tree with the given non-decreasing level sizes (every node gets a child)."""
    parents = []
    for coarse, fine in zip(level_sizes[:-1], level_sizes[1:]):
        if fine < coarse:
            raise ConfigError(f"level sizes must be non-decreasing for a random tree: {list(level_sizes)}")
        pm = np.concatenate([np.arange(coarse), rng.integers(0, coarse, fine - coarse)])
        parents.append(rng.permutation(pm))
    return build_hierarchy(level_sizes, parents)
