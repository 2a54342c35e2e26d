"""Hierarchical multi-level classification with cross-level enhancement and consistency."""

from .cbc import ConsistencyConfig, LevelDistributions, coarse_to_fine, consistency_loss, fine_to_coarse, js_divergence
from .data import Dataset, SynthSpec, generate_synthetic, load_dataset, save_dataset, train_test_split
from .hierarchy import TreeHierarchy, build_hierarchy, load_hierarchy
from .metrics import EvalReport, tcr, wa_acc
from .mge import EnhancementConfig, cam_attention, mod
from .model import ChbcModel, ModelConfig, load_checkpoint, save_checkpoint, total_loss
from .numerics import Tensor
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
