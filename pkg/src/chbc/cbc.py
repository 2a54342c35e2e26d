"""Cross-level bidirectional consistency between per-level class distributions.

All functions accept a single distribution (shape ``c``) or a batch of them
(``B x c``, one distribution per row).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, ParameterError
from .hierarchy import TreeHierarchy
from .numerics import LOG_EPS, Tensor


class Strategy(str, enum.Enum):
    ALL = "all"
    NEIGHBOR = "neighbor"
    FINEST = "finest"


class Distance(str, enum.Enum):
    JS = "js"
    KL = "kl"


def _coerce(kind, value):
    return value if isinstance(value, kind) else kind(str(value).lower())


@dataclass(frozen=True)
class ConsistencyConfig:
    strategy: Strategy = Strategy.ALL
    distance: Distance = Distance.JS
    temperature: float = 2.0
    enabled: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "strategy", _coerce(Strategy, self.strategy))
            object.__setattr__(self, "distance", _coerce(Distance, self.distance))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass
class LevelDistributions:
    """Tempered per-level distributions ``s_1..s_h`` plus the concatenated head's ``s_all``."""

    levels: list[Tensor]
    all: Tensor
    temperature: float

    @classmethod
    def from_logits(cls, level_logits: Sequence[Tensor], logits_all: Tensor,
                    temperature: float) -> "LevelDistributions":
        return cls([nx.softmax_t(z, temperature) for z in level_logits],
                   nx.softmax_t(logits_all, temperature), temperature)


def _as_prob(p) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))


def _const(mat: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(mat.astype(like.dtype))


def coarse_to_fine(s_coarse, adjacency: np.ndarray) -> Tensor:
    """Spread a coarse distribution over fine classes via ``D``, renormalised to sum 1."""
    s = _as_prob(s_coarse)
    if s.shape[-1] != adjacency.shape[0]:
        raise DimensionError(f"coarse_to_fine: distribution width {s.shape[-1]} vs D {adjacency.shape}")
    single = s.ndim == 1
    if single:
        s = nx.reshape(s, (1, -1))
    spread = nx.matmul(s, _const(adjacency, s))
    out = spread / nx.sum_(spread, axis=-1, keepdims=True)
    return nx.reshape(out, (adjacency.shape[1],)) if single else out


def fine_to_coarse(s_fine, adjacency: np.ndarray) -> Tensor:
    """Sum fine-class mass onto ancestors via ``D^T``; mass is conserved, no renormalisation."""
    s = _as_prob(s_fine)
    if s.shape[-1] != adjacency.shape[1]:
        raise DimensionError(f"fine_to_coarse: distribution width {s.shape[-1]} vs D {adjacency.shape}")
    single = s.ndim == 1
    if single:
        s = nx.reshape(s, (1, -1))
    out = nx.matmul(s, _const(adjacency.T, s))
    return nx.reshape(out, (adjacency.shape[0],)) if single else out


def kl_divergence(p, q, eps: float = LOG_EPS) -> Tensor:
    """``sum p (log p - log q)`` along the last axis, logs floored at ``eps``."""
    p, q = _as_prob(p), _as_prob(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence: shapes differ {p.shape} vs {q.shape}")
    return nx.sum_(p * (nx.log(p, eps) - nx.log(q, eps)), axis=-1)


def js_divergence(p, q, eps: float = LOG_EPS) -> Tensor:
    """Jensen-Shannon divergence along the last axis; bounded by ``ln 2``."""
    p, q = _as_prob(p), _as_prob(q)
    if p.shape != q.shape:
        raise DimensionError(f"js_divergence: shapes differ {p.shape} vs {q.shape}")
    m = nx.scale(p + q, 0.5)
    return nx.scale(kl_divergence(p, m, eps) + kl_divergence(q, m, eps), 0.5)


def contributors(level: int, depth: int, strategy: Strategy) -> list[int]:
    """Levels whose projections form the combined distribution for ``level``."""
    if not 1 <= level <= depth:
        raise ParameterError(f"level {level} out of range 1..{depth}")
    strategy = Strategy(strategy)
    if strategy is Strategy.ALL:
        return [k for k in range(1, depth + 1) if k != level]
    if strategy is Strategy.NEIGHBOR:
        return [k for k in (level - 1, level + 1) if 1 <= k <= depth]
    return [depth] if level < depth else list(range(1, depth))


def combined_distribution(levels: Sequence[Tensor], level: int, th: TreeHierarchy,
                          cfg: ConsistencyConfig) -> Tensor:
    """Average of the other levels' distributions projected onto ``level``."""
    if len(levels) != th.depth:
        raise DimensionError(f"expected {th.depth} level distributions, got {len(levels)}")
    ks = contributors(level, th.depth, cfg.strategy)
    total = None
    for k in ks:
        if k < level:
            term = coarse_to_fine(levels[k - 1], th.adjacency(k, level))
        else:
            term = fine_to_coarse(levels[k - 1], th.adjacency(level, k))
        total = term if total is None else total + term
    return nx.scale(total, 1.0 / len(ks))


def _distance(p: Tensor, q: Tensor, cfg: ConsistencyConfig) -> Tensor:
    if cfg.distance is Distance.JS:
        return js_divergence(p, q)
    return kl_divergence(p, q)


def consistency_loss(s: LevelDistributions, th: TreeHierarchy, cfg: ConsistencyConfig) -> Tensor:
    """Sum over levels of the divergence to the combined distribution, plus the ``s_all`` term.

    ``s_all`` is compared with the finest level's combined distribution.
    Batched inputs are averaged over rows.
    """
    if len(s.levels) != th.depth:
        raise DimensionError(f"expected {th.depth} level distributions, got {len(s.levels)}")
    total = None
    combined_finest = None
    for level in range(1, th.depth + 1):
        combined = combined_distribution(s.levels, level, th, cfg)
        term = _distance(s.levels[level - 1], combined, cfg)
        total = term if total is None else total + term
        if level == th.depth:
            combined_finest = combined
    total = total + _distance(s.all, combined_finest, cfg)
    return nx.mean(total) if total.ndim else total
