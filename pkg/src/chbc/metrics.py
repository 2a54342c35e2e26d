"""Hierarchical classification metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .hierarchy import TreeHierarchy


@dataclass
class EvalReport:
    level_accuracy: list[float]
    wa_acc: float
    topk_wa_acc: dict[int, float]
    tcr: float
    same_superclass_errors: int
    different_superclass_errors: int
    num_samples: int
    level_sizes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topk_wa_acc"] = {str(k): v for k, v in self.topk_wa_acc.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["topk_wa_acc"] = {int(k): v for k, v in d["topk_wa_acc"].items()}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def format_table(self) -> str:
        """Fixed-width table: one column per level, then the summary metrics (percent)."""
        levels = [f"L{i} ({c})" if self.level_sizes else f"L{i}"
                  for i, c in enumerate(self.level_sizes or [0] * len(self.level_accuracy), start=1)]
        cols = levels + ["wa_acc", "top3_wa", "top5_wa", "TCR"]
        vals = list(self.level_accuracy) + [self.wa_acc, self.topk_wa_acc.get(3, float("nan")),
                                           self.topk_wa_acc.get(5, float("nan")), self.tcr]
        width = max(10, max(len(c) for c in cols) + 2)
        head = "".join(c.rjust(width) for c in cols)
        row = "".join(f"{100 * v:.1f}".rjust(width) for v in vals)
        tail = (f"N={self.num_samples}  finest errors: same superclass={self.same_superclass_errors}, "
                f"different superclass={self.different_superclass_errors}")
        return f"{head}\n{row}\n{tail}"


def wa_acc(accs: Sequence[float], level_sizes: Sequence[int]) -> float:
    """Accuracy averaged over levels with class counts as weights."""
    accs = np.asarray(accs, dtype=np.float64)
    sizes = np.asarray(level_sizes, dtype=np.float64)
    if accs.shape != sizes.shape or accs.ndim != 1:
        raise ParameterError(f"wa_acc: {accs.size} accuracies vs {sizes.size} level sizes")
    if (sizes <= 0).any():
        raise ParameterError("wa_acc: level sizes must be positive")
    return float(np.dot(sizes / sizes.sum(), accs))


def _check_predictions(predictions: np.ndarray, th: TreeHierarchy) -> np.ndarray:
    predictions = np.asarray(predictions)
    if predictions.ndim != 2 or predictions.shape[1] != th.depth:
        raise ParameterError(f"predictions must be N x {th.depth}, got {predictions.shape}")
    for lv in range(1, th.depth + 1):
        col = predictions[:, lv - 1]
        if col.size and (col.min() < 0 or col.max() >= th.size(lv)):
            raise ParameterError(f"prediction index out of range at level {lv}")
    return predictions.astype(np.int64)


def path_is_consistent(predictions: np.ndarray, th: TreeHierarchy) -> np.ndarray:
    """Boolean per row: does the predicted path follow the tree's parent links?"""
    predictions = _check_predictions(predictions, th)
    ok = np.ones(len(predictions), dtype=bool)
    for lv in range(2, th.depth + 1):
        ok &= th.parent_map(lv)[predictions[:, lv - 1]] == predictions[:, lv - 2]
    return ok


def tcr(predictions: np.ndarray, finest_truth: np.ndarray, th: TreeHierarchy) -> float:
    """Share of samples whose predicted path is in the tree and whose leaf is correct."""
    predictions = _check_predictions(predictions, th)
    finest_truth = np.asarray(finest_truth)
    if finest_truth.shape != (len(predictions),):
        raise ParameterError(f"finest_truth must have {len(predictions)} entries, got {finest_truth.shape}")
    if not len(predictions):
        return 0.0
    hit = path_is_consistent(predictions, th) & (predictions[:, -1] == finest_truth)
    return float(hit.mean())


def topk_accuracy(scores: np.ndarray, truth: np.ndarray, k: int) -> float:
    """Fraction of rows whose true class is among the ``k`` highest scores.

    Ties go to the lower class index.  ``k >= c`` counts every row as a hit.
    """
    scores = np.asarray(scores)
    truth = np.asarray(truth)
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if scores.ndim != 2 or truth.shape != (scores.shape[0],):
        raise ParameterError(f"topk_accuracy: scores {scores.shape} vs truth {truth.shape}")
    if not len(truth):
        return 0.0
    if k >= scores.shape[1]:
        return 1.0
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float((order == truth[:, None]).any(axis=1).mean())


def topk_wa_acc(scores: Sequence[np.ndarray], truths: np.ndarray, level_sizes: Sequence[int], k: int) -> float:
    truths = np.asarray(truths)
    if len(scores) != len(level_sizes) or truths.shape[1] != len(level_sizes):
        raise ParameterError("topk_wa_acc: need one score matrix and truth column per level")
    accs = [topk_accuracy(s, truths[:, i], k) for i, s in enumerate(scores)]
    return wa_acc(accs, level_sizes)


def superclass_histogram(finest_preds: np.ndarray, finest_truths: np.ndarray,
                         th: TreeHierarchy) -> tuple[int, int]:
    """Split finest-level errors by whether prediction and truth share a parent."""
    preds = np.asarray(finest_preds, dtype=np.int64)
    truths = np.asarray(finest_truths, dtype=np.int64)
    c_h = th.level_sizes[-1]
    if preds.shape != truths.shape:
        raise ParameterError(f"histogram: shapes differ {preds.shape} vs {truths.shape}")
    if preds.size and (min(preds.min(), truths.min()) < 0 or max(preds.max(), truths.max()) >= c_h):
        raise ParameterError(f"histogram: finest index out of range [0, {c_h})")
    wrong = preds != truths
    parent = th.parent_map(th.depth)
    same = int((wrong & (parent[preds] == parent[truths])).sum())
    return same, int(wrong.sum()) - same


def evaluate_scores(scores: Sequence[np.ndarray], labels: np.ndarray, th: TreeHierarchy,
                    ks: Sequence[int] = (3, 5)) -> EvalReport:
    """Build an :class:`EvalReport` from per-level score matrices and ``N x h`` labels."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.stack([np.asarray(s).argmax(axis=1) for s in scores], axis=1)
    n = len(labels)
    accs = [float((preds[:, i] == labels[:, i]).mean()) if n else 0.0 for i in range(th.depth)]
    sizes = list(th.level_sizes)
    same, diff = superclass_histogram(preds[:, -1], labels[:, -1], th)
    return EvalReport(
        level_accuracy=accs,
        wa_acc=wa_acc(accs, sizes),
        topk_wa_acc={k: topk_wa_acc(scores, labels, sizes, k) for k in ks},
        tcr=tcr(preds, labels[:, -1], th),
        same_superclass_errors=same,
        different_superclass_errors=diff,
        num_samples=n,
        level_sizes=sizes,
    )
