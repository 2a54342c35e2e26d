"""Trunk + per-level branch network with ``h + 1`` classifier heads.

The shared trunk maps an input to ``B x C x H x W`` features.  Each level owns
an attention submodule (conv stack plus a linear head whose weights drive the
CAM mask) and a predict submodule (conv stack).  Enhanced, gated features are
pooled and classified per level, and their concatenation feeds one extra head
over the finest classes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .cbc import ConsistencyConfig, LevelDistributions, consistency_loss
from .errors import ConfigError, ContractError, DataError, DimensionError
from .hierarchy import TreeHierarchy, hierarchy_from_dict
from .mge import EnhancementConfig, MgeOutput, cam_attention, enhance_level, fuse
from .numerics import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture sizes.

    ``input_shape`` is ``[C_in, H_in, W_in]`` for images or ``[F]`` for feature
    vectors.  Image trunks are stride-2 3x3 convolutions, one per entry of
    ``trunk_channels``; vector trunks are a single linear layer reshaped onto a
    ``grid x grid`` map with ``trunk_channels[-1]`` channels.
    """

    input_shape: list[int] = field(default_factory=lambda: [3, 64, 64])
    trunk_channels: list[int] = field(default_factory=lambda: [16, 32, 32])
    branch_depth: int = 2
    grid: int = 4
    level_sizes: list[int] = field(default_factory=list)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.input_shape = [int(v) for v in self.input_shape]
        self.trunk_channels = [int(v) for v in self.trunk_channels]
        self.level_sizes = [int(v) for v in self.level_sizes]
        if len(self.input_shape) not in (1, 3) or min(self.input_shape, default=0) < 1:
            raise ConfigError(f"input_shape must be [C, H, W] or [F] with positive sizes, got {self.input_shape}")
        if not self.trunk_channels or min(self.trunk_channels) < 1:
            raise ConfigError(f"trunk_channels must be non-empty and positive, got {self.trunk_channels}")
        if self.branch_depth < 1:
            raise ConfigError(f"branch_depth must be >= 1, got {self.branch_depth}")
        if self.level_sizes and len(self.level_sizes) < 2:
            raise ConfigError(f"need at least 2 hierarchy levels, got {self.level_sizes}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        grid = self.feature_grid
        if grid[0] < 2 or grid[1] < 2:
            raise ConfigError(f"feature grid {grid} is smaller than 2x2")

    @property
    def is_vector(self) -> bool:
        return len(self.input_shape) == 1

    @property
    def channels(self) -> int:
        return self.trunk_channels[-1]

    @property
    def feature_grid(self) -> tuple[int, int]:
        if self.is_vector:
            return self.grid, self.grid
        h, w = self.input_shape[1:]
        for _ in self.trunk_channels:
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w


@dataclass
class ForwardOutput:
    level_logits: list[Tensor]
    logits_all: Tensor
    attention_logits: list[Tensor]
    mge: MgeOutput
    distributions: LevelDistributions


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ChbcModel:
    """The full network; parameters live in an insertion-ordered manifest."""

    def __init__(self, config: ModelConfig, enhancement: EnhancementConfig | None = None,
                 consistency: ConsistencyConfig | None = None):
        if len(config.level_sizes) < 2:
            raise ConfigError("ModelConfig.level_sizes must list >= 2 levels")
        self.config = config
        self.enhancement = enhancement or EnhancementConfig()
        self.consistency = consistency or ConsistencyConfig()
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(config.seed)
        self._build()
        del self._rng

    # -- construction -----------------------------------------------------
    def _add(self, name: str, shape: tuple[int, ...], fan_in: int | None) -> None:
        data = (np.zeros(shape, dtype=self.dtype) if fan_in is None
                else _he_uniform(self._rng, shape, fan_in, self.dtype))
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _add_conv(self, prefix: str, c_in: int, c_out: int, k: int = 3) -> None:
        self._add(f"{prefix}.weight", (c_out, c_in, k, k), c_in * k * k)
        self._add(f"{prefix}.bias", (c_out,), None)

    def _add_linear(self, prefix: str, n_in: int, n_out: int) -> None:
        self._add(f"{prefix}.weight", (n_out, n_in), n_in)
        self._add(f"{prefix}.bias", (n_out,), None)

    def _build(self) -> None:
        cfg = self.config
        c = cfg.channels
        if cfg.is_vector:
            gh, gw = cfg.feature_grid
            self._add_linear("trunk.0", cfg.input_shape[0], c * gh * gw)
        else:
            c_in = cfg.input_shape[0]
            for k, width in enumerate(cfg.trunk_channels):
                self._add_conv(f"trunk.{k}", c_in, width)
                c_in = width
        for i, size in enumerate(cfg.level_sizes, start=1):
            if self.enhancement.enabled:
                for k in range(cfg.branch_depth):
                    self._add_conv(f"branch.{i}.attention.{k}", c, c)
                self._add_linear(f"branch.{i}.attention_head", c, size)
            for k in range(cfg.branch_depth):
                self._add_conv(f"branch.{i}.predict.{k}", c, c)
        for i, size in enumerate(cfg.level_sizes, start=1):
            self._add_linear(f"head.{i}", c, size)
        self._add_linear("head.all", c * len(cfg.level_sizes), cfg.level_sizes[-1])

    # -- parameters -------------------------------------------------------
    @property
    def depth(self) -> int:
        return len(self.config.level_sizes)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, t.shape) for name, t in self.params.items()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # -- forward ----------------------------------------------------------
    def _conv_stack(self, x: Tensor, prefix: str, depth: int, stride: int = 1) -> Tensor:
        for k in range(depth):
            x = nx.relu(nx.conv2d(x, self.params[f"{prefix}.{k}.weight"], self.params[f"{prefix}.{k}.bias"],
                                  stride=stride, padding=1))
        return x

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return nx.linear(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])

    def trunk(self, x: Tensor) -> Tensor:
        cfg = self.config
        if cfg.is_vector:
            gh, gw = cfg.feature_grid
            flat = nx.relu(self._linear(x, "trunk.0"))
            return nx.reshape(flat, (x.shape[0], cfg.channels, gh, gw))
        return self._conv_stack(x, "trunk", len(cfg.trunk_channels), stride=2)

    def _check_input(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        expected = tuple(self.config.input_shape)
        if x.ndim != len(expected) + 1 or x.shape[1:] != expected:
            raise DimensionError(f"input batch {x.shape} does not match input_shape {list(expected)}")
        return x

    def forward(self, images, labels: np.ndarray | None = None, training: bool = False) -> ForwardOutput:
        """Run the network.

        In training mode CAM masks use the ground-truth class of each level,
        so ``labels`` (``B x h``) is required; otherwise each attention head's
        own argmax picks the class.
        """
        x = self._check_input(images)
        if training and labels is None:
            raise ContractError("labels are required in training mode")
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (x.shape[0], self.depth):
                raise DimensionError(f"labels {labels.shape} do not match batch {x.shape[0]} x {self.depth} levels")
        h = self.depth
        cfg = self.config
        shared = self.trunk(x)
        batch = x.shape[0]
        gh, gw = cfg.feature_grid

        attention, features, attention_logits = [], [], []
        for i in range(1, h + 1):
            features.append(self._conv_stack(shared, f"branch.{i}.predict", cfg.branch_depth))
            if not self.enhancement.enabled:
                attention.append(Tensor(np.ones((batch, gh, gw), dtype=self.dtype)))
                continue
            att_map = self._conv_stack(shared, f"branch.{i}.attention", cfg.branch_depth)
            att_logits = self._linear(nx.avg_pool_spatial(att_map), f"branch.{i}.attention_head")
            attention_logits.append(att_logits)
            if training:
                index = labels[:, i - 1]
            else:
                index = att_logits.data.argmax(axis=1)
            attention.append(cam_attention(att_map, self.params[f"branch.{i}.attention_head.weight"], index))

        enh_cfg = self.enhancement if self.enhancement.enabled else EnhancementConfig(alpha=0.0)
        att_enh, feat_enh, fused, pooled = [], [], [], []
        for i in range(1, h + 1):
            a_i, f_i = enhance_level(attention, features, i, enh_cfg)
            att_enh.append(a_i)
            feat_enh.append(f_i)
            fused.append(fuse(f_i, a_i))
            pooled.append(nx.avg_pool_spatial(fused[-1]))
        pooled_all = nx.concat_channels(pooled)

        level_logits = [self._linear(p, f"head.{i}") for i, p in enumerate(pooled, start=1)]
        logits_all = self._linear(pooled_all, "head.all")
        mge = MgeOutput(attention, att_enh, features, feat_enh, fused, pooled, pooled_all)
        dists = LevelDistributions.from_logits(level_logits, logits_all, self.consistency.temperature)
        return ForwardOutput(level_logits, logits_all, attention_logits, mge, dists)

    __call__ = forward

    # -- serialisation ----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self.params):
            raise DataError("parameter names do not match the model manifest")
        for name, arr in state.items():
            target = self.params[name]
            if arr.shape != target.shape:
                raise DataError(f"parameter {name}: shape {arr.shape} != {target.shape}")
            target.data = np.array(arr, dtype=self.dtype)


def classification_loss(out: ForwardOutput, labels: np.ndarray) -> Tensor:
    """Per-level cross-entropy, the concatenated head on the finest labels,
    and the auxiliary attention-head cross-entropy when attention is active."""
    labels = np.asarray(labels)
    h = len(out.level_logits)
    loss = nx.cross_entropy(out.logits_all, labels[:, h - 1])
    for i, logits in enumerate(out.level_logits):
        loss = loss + nx.cross_entropy(logits, labels[:, i])
    for i, logits in enumerate(out.attention_logits):
        loss = loss + nx.cross_entropy(logits, labels[:, i])
    return loss


@dataclass
class LossBreakdown:
    total: Tensor
    classification: Tensor
    consistency: Tensor | None
    output: ForwardOutput


def total_loss(model: ChbcModel, images, labels: np.ndarray, hierarchy: TreeHierarchy) -> LossBreakdown:
    """Unweighted sum of classification and consistency losses for one batch."""
    if list(hierarchy.level_sizes) != model.config.level_sizes:
        raise ConfigError(f"hierarchy sizes {list(hierarchy.level_sizes)} != model {model.config.level_sizes}")
    out = model.forward(images, labels, training=True)
    l_cls = classification_loss(out, labels)
    if not model.consistency.enabled:
        return LossBreakdown(l_cls, l_cls, None, out)
    l_con = consistency_loss(out.distributions, hierarchy, model.consistency)
    return LossBreakdown(l_cls + l_con, l_cls, l_con, out)


def predict_scores(model: ChbcModel, images, batch_size: int = 256) -> list[np.ndarray]:
    """Per-level class probabilities (temperature 1) for evaluation.

    The finest level is scored by the concatenated head.
    """
    x = np.asarray(images.data if isinstance(images, Tensor) else images)
    h = model.depth
    chunks: list[list[np.ndarray]] = [[] for _ in range(h)]
    for start in range(0, len(x), batch_size):
        out = model.forward(x[start:start + batch_size])
        heads = out.level_logits[:-1] + [out.logits_all]
        for i, logits in enumerate(heads):
            chunks[i].append(nx.softmax_t(logits.detach(), 1.0).data)
    return [np.concatenate(c, axis=0) for c in chunks]


# -- checkpoints ------------------------------------------------------------
def save_checkpoint(model: ChbcModel, directory: str | Path, hierarchy: TreeHierarchy | None = None) -> Path:
    """Write ``manifest.json`` and ``params.f32`` (little-endian float32, manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "parameters": [{"name": n, "shape": list(s)} for n, s in model.manifest()],
        "model": asdict(model.config),
        "enhancement": _enum_dict(asdict(model.enhancement)),
        "consistency": _enum_dict(asdict(model.consistency)),
    }
    if hierarchy is not None:
        manifest["hierarchy"] = hierarchy.to_dict()
    blob = np.concatenate([t.data.astype("<f4").ravel() for t in model.parameters()])
    (directory / "params.f32").write_bytes(blob.tobytes())
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return directory


def _enum_dict(d: dict) -> dict:
    return {k: (v.value if hasattr(v, "value") else v) for k, v in d.items()}


def load_checkpoint(directory: str | Path) -> tuple[ChbcModel, TreeHierarchy | None]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint format_version {manifest.get('format_version')}")
    model = ChbcModel(ModelConfig(**manifest["model"]), EnhancementConfig(**manifest["enhancement"]),
                      ConsistencyConfig(**manifest["consistency"]))
    entries = manifest["parameters"]
    if [(e["name"], tuple(e["shape"])) for e in entries] != model.manifest():
        raise DataError("checkpoint manifest does not match the rebuilt model")
    raw = (directory / "params.f32").read_bytes()
    expected = 4 * model.num_parameters()
    if len(raw) != expected:
        raise DataError(f"params.f32 holds {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f4")
    state, offset = {}, 0
    for name, shape in model.manifest():
        size = int(np.prod(shape))
        state[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    model.load_state_dict(state)
    hierarchy = hierarchy_from_dict(manifest["hierarchy"]) if "hierarchy" in manifest else None
    return model, hierarchy


def parameter_subset(model: ChbcModel, rng: np.random.Generator, count: int) -> list[tuple[str, tuple[int, ...]]]:
    """``count`` random (parameter name, entry index) pairs spread over the manifest."""
    names = list(model.params)
    picks = []
    for _ in range(count):
        name = names[rng.integers(len(names))]
        shape = model.params[name].shape
        picks.append((name, tuple(int(rng.integers(s)) for s in shape)))
    return picks

