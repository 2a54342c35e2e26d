"""SGD with momentum, learning-rate schedules, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, validate_dataset
from .errors import ConfigError, NumericalError
from .metrics import EvalReport, evaluate_scores
from .model import ChbcModel, predict_scores, save_checkpoint, total_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 1e-2
    momentum: float = 0.9
    schedule: str = "exponential"
    gamma: float = 0.9
    t_max: int | None = None
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigError("checkpoint_every and eval_every must be >= 0")
        self.lr_schedule()  # validates schedule parameters

    def lr_schedule(self) -> "Schedule":
        return Schedule(self.schedule, self.lr0, self.gamma,
                        self.t_max if self.t_max is not None else self.epochs)


@dataclass(frozen=True)
class Schedule:
    """Per-epoch learning rate: ``exponential`` (``lr0 * gamma**epoch``) or ``cosine``."""

    kind: str
    lr0: float
    gamma: float = 0.9
    t_max: int = 1

    def __post_init__(self):
        if self.kind not in ("exponential", "cosine"):
            raise ConfigError(f"schedule must be 'exponential' or 'cosine', got {self.kind!r}")
        if self.kind == "exponential" and not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.kind == "cosine" and self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if schedule.kind == "exponential":
        return schedule.lr0 * schedule.gamma ** epoch
    return schedule.lr0 * (1.0 + math.cos(math.pi * epoch / schedule.t_max)) / 2.0


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
             lr: float, momentum: float, names: Sequence[str] | None = None) -> None:
    """In-place momentum update: ``v = momentum * v + g``; ``p -= lr * v``."""
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or velocity[k].shape != p.shape:
            raise ConfigError(f"sgd_step: shape mismatch for parameter {k}")
        if not np.isfinite(g).all():
            label = names[k] if names is not None else f"#{k}"
            raise NumericalError(f"non-finite gradient in parameter {label}")
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p -= lr * v


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def steps(self) -> list[dict]:
        return [r for r in self.rows if r["kind"] == "step"]

    def evals(self) -> list[dict]:
        return [r for r in self.rows if r["kind"] == "eval"]

    def epoch_mean(self, key: str) -> list[float]:
        """Mean of a step column per epoch, in epoch order."""
        by_epoch: dict[int, list[float]] = {}
        for r in self.steps():
            by_epoch.setdefault(r["epoch"], []).append(r[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "TrainLog":
        with open(path, encoding="utf-8") as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def evaluate(model: ChbcModel, ds: Dataset, batch_size: int = 256) -> EvalReport:
    return evaluate_scores(predict_scores(model, ds.inputs, batch_size), ds.labels, ds.hierarchy)


def train(model: ChbcModel, dataset: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
          out_dir: str | Path | None = None) -> tuple[ChbcModel, TrainLog]:
    """Optimise ``model`` in place on ``dataset``.

    With ``out_dir`` set, writes ``train_log.jsonl``, periodic checkpoints under
    ``checkpoints/``, the final ``checkpoint/`` and ``eval_report.json``.
    """
    validate_dataset(dataset)
    if eval_data is not None:
        validate_dataset(eval_data)
    th = dataset.hierarchy
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    schedule = cfg.lr_schedule()
    rng = np.random.default_rng(cfg.seed)
    names = list(model.params)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    trail = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch)
        for images, labels in dataset.batches(cfg.batch_size, rng):
            model.zero_grad()
            losses = total_loss(model, images, labels, th)
            value = losses.total.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
            losses.total.backward()
            sgd_step([p.data for p in params], [p.grad for p in params], velocity, lr, cfg.momentum, names)
            l_con = losses.consistency.item() if losses.consistency is not None else 0.0
            trail.rows.append({"kind": "step", "epoch": epoch, "step": step, "lr": lr,
                               "loss_cls": losses.classification.item(), "loss_con": l_con, "loss": value})
            step += 1
        if eval_data is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            report = evaluate(model, eval_data)
            trail.rows.append({"kind": "eval", "epoch": epoch, "step": step, "report": report.to_dict()})
            log.info("epoch %d: wa_acc=%.3f tcr=%.3f", epoch, report.wa_acc, report.tcr)
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out / "checkpoints" / f"epoch_{epoch + 1:04d}", th)

    if out is not None:
        trail.write_jsonl(out / "train_log.jsonl")
        save_checkpoint(model, out / "checkpoint", th)
        final = evaluate(model, eval_data if eval_data is not None else dataset)
        (out / "eval_report.json").write_text(final.to_json(), encoding="utf-8")
    return model, trail
