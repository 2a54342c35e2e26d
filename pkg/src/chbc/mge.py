"""Multi-granularity enhancement: CAM masks, orthogonal decomposition, fusion."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, ParameterError
from .numerics import Tensor

MOD_EPS = 1e-8


class _CaselessEnum(str, enum.Enum):
    @classmethod
    def _missing_(cls, value):
        for member in cls:
            if isinstance(value, str) and member.value.lower() == value.lower():
                return member
        return None


class ModStrategy(_CaselessEnum):
    MAT_ORTH = "MatOrth"
    ADD_ALL = "AddAll"
    ADD_PRE = "AddPre"


class SourceLevel(_CaselessEnum):
    PREVIOUS = "previous"
    FIRST = "first"


@dataclass(frozen=True)
class EnhancementConfig:
    """Knobs for cross-level enhancement.

    The defaults decompose attention against the previous level and features
    against the first level, with orthogonal decomposition and ``alpha=0.4``.
    ``enabled=False`` gives the baseline wiring: masks fixed at one, no
    enhancement and no attention heads.
    """

    alpha: float = 0.4
    mod_strategy: ModStrategy = ModStrategy.MAT_ORTH
    attention_source: SourceLevel = SourceLevel.PREVIOUS
    feature_source: SourceLevel = SourceLevel.FIRST
    enabled: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha}")
        try:
            object.__setattr__(self, "mod_strategy", ModStrategy(self.mod_strategy))
            object.__setattr__(self, "attention_source", SourceLevel(self.attention_source))
            object.__setattr__(self, "feature_source", SourceLevel(self.feature_source))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class MgeOutput:
    attention: list[Tensor]          # A_i, B x H x W
    attention_enhanced: list[Tensor]  # A'_i
    features: list[Tensor]           # F_i, B x C x H x W
    features_enhanced: list[Tensor]  # F'_i
    fused: list[Tensor]              # F'_i gated by A'_i
    pooled: list[Tensor]             # B x C
    pooled_all: Tensor               # B x (C * h)


def mod(m_fine: Tensor, m_coarse: Tensor, eps: float = MOD_EPS) -> Tensor:
    """Remove from ``m_fine`` its projection onto ``m_coarse``.

    Inner products run over the two trailing (spatial) axes, so a
    ``B x C x H x W`` input is decomposed channel by channel against the same
    channel of ``m_coarse``.
    """
    if m_fine.shape != m_coarse.shape:
        raise DimensionError(f"mod: shapes differ {m_fine.shape} vs {m_coarse.shape}")
    if m_fine.ndim < 2:
        raise DimensionError(f"mod needs at least 2 spatial axes, got {m_fine.shape}")
    spatial = (-2, -1)
    dot = nx.sum_(m_fine * m_coarse, axis=spatial, keepdims=True)
    norm = nx.sum_(m_coarse * m_coarse, axis=spatial, keepdims=True)
    coef = dot / (norm + eps)
    return m_fine - coef * m_coarse


def projection_coefficient(m_fine: np.ndarray, m_coarse: np.ndarray, eps: float = MOD_EPS) -> np.ndarray:
    """Scalar projection coefficient per leading index, from flattened maps."""
    f = m_fine.reshape(m_fine.shape[:-2] + (-1,))
    g = m_coarse.reshape(m_coarse.shape[:-2] + (-1,))
    return np.einsum("...k,...k->...", f, g) / (np.einsum("...k,...k->...", g, g) + eps)


def enhance(m: Tensor, m_orth: Tensor, alpha: float) -> Tensor:
    if m.shape != m_orth.shape:
        raise DimensionError(f"enhance: shapes differ {m.shape} vs {m_orth.shape}")
    return m + nx.scale(m_orth, alpha)


def cam_attention(feature_map: Tensor, head_weights: Tensor, class_index: np.ndarray) -> Tensor:
    """Class activation map for one class per sample, min-max scaled to ``[0, 1]``.

    ``feature_map`` is ``B x C x H x W``; ``head_weights`` is the ``c_i x C``
    weight of the linear head that classifies the pooled map.
    """
    if feature_map.ndim != 4:
        raise DimensionError(f"cam_attention expects B x C x H x W, got {feature_map.shape}")
    batch, channels = feature_map.shape[:2]
    if head_weights.ndim != 2 or head_weights.shape[1] != channels:
        raise DimensionError(f"cam_attention: head weights {head_weights.shape} vs {channels} channels")
    class_index = np.asarray(class_index)
    if class_index.shape != (batch,):
        raise ParameterError(f"cam_attention: need one class per sample, got shape {class_index.shape}")
    if class_index.size and (class_index.min() < 0 or class_index.max() >= head_weights.shape[0]):
        raise ParameterError(f"cam_attention: class index out of range [0, {head_weights.shape[0]})")
    w = nx.reshape(nx.take_rows(head_weights, class_index), (batch, channels, 1, 1))
    raw = nx.sum_(feature_map * w, axis=1)
    return nx.minmax_normalize(raw)


def _source(items: Sequence[Tensor], i: int, which: SourceLevel) -> Tensor:
    return items[0] if which is SourceLevel.FIRST else items[i - 2]


def enhance_level(attention: Sequence[Tensor], features: Sequence[Tensor], i: int,
                  cfg: EnhancementConfig) -> tuple[Tensor, Tensor]:
    """Enhanced ``(A'_i, F'_i)`` for level ``i`` (1-based) from raw levels ``1..i``.

    Level 1 is returned untouched.  ``AddAll`` ignores the source settings and
    adds the alpha-scaled sum of every preceding level.
    """
    if not 1 <= i <= len(attention) or len(features) < i:
        raise ParameterError(f"enhance_level: level {i} outside 1..{min(len(attention), len(features))}")
    a_i, f_i = attention[i - 1], features[i - 1]
    if i == 1:
        return a_i, f_i
    strategy = cfg.mod_strategy
    if strategy is ModStrategy.MAT_ORTH:
        a_src = _source(attention, i, cfg.attention_source)
        f_src = _source(features, i, cfg.feature_source)
        return enhance(a_i, mod(a_i, a_src), cfg.alpha), enhance(f_i, mod(f_i, f_src), cfg.alpha)
    if strategy is ModStrategy.ADD_PRE:
        a_src = _source(attention, i, cfg.attention_source)
        f_src = _source(features, i, cfg.feature_source)
        return enhance(a_i, a_src, cfg.alpha), enhance(f_i, f_src, cfg.alpha)
    a_sum, f_sum = attention[0], features[0]
    for k in range(1, i - 1):
        a_sum = a_sum + attention[k]
        f_sum = f_sum + features[k]
    return enhance(a_i, a_sum, cfg.alpha), enhance(f_i, f_sum, cfg.alpha)


def fuse(f_enh: Tensor, a_enh: Tensor) -> Tensor:
    """Gate every channel of ``f_enh`` by the spatial mask ``a_enh``."""
    if f_enh.ndim != 4 or a_enh.ndim != 3:
        raise DimensionError(f"fuse expects B x C x H x W and B x H x W, got {f_enh.shape}, {a_enh.shape}")
    return nx.broadcast_mul(f_enh, a_enh)


def export_masks(masks: Sequence[Tensor], out_dir: str | Path, stem: str = "masks") -> Path:
    """Write per-level masks as ``<stem>.f32`` (B x h x H x W) plus a JSON shape sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stacked = np.stack([m.data for m in masks], axis=1).astype("<f4")
    path = out_dir / f"{stem}.f32"
    path.write_bytes(stacked.tobytes())
    (out_dir / f"{stem}.json").write_text(json.dumps({"shape": list(stacked.shape)}), encoding="utf-8")
    return path


def load_masks(out_dir: str | Path, stem: str = "masks") -> np.ndarray:
    out_dir = Path(out_dir)
    shape = json.loads((out_dir / f"{stem}.json").read_text(encoding="utf-8"))["shape"]
    return np.frombuffer((out_dir / f"{stem}.f32").read_bytes(), dtype="<f4").reshape(shape)
