"""``chbc`` command-line entry point.

Exit codes: 0 ok, 2 configuration/usage, 3 data, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .cbc import ConsistencyConfig, coarse_to_fine, fine_to_coarse
from .data import SynthSpec, generate_synthetic, load_dataset, save_dataset, train_test_split
from .errors import ChbcError, ConfigError, DataError
from .hierarchy import load_hierarchy
from .metrics import EvalReport
from .mge import EnhancementConfig, export_masks
from .model import ChbcModel, ModelConfig, load_checkpoint
from .trainer import TrainConfig, TrainLog, evaluate, train

log = logging.getLogger("chbc")

_SECTIONS = {"model": ModelConfig, "train": TrainConfig,
             "enhancement": EnhancementConfig, "consistency": ConsistencyConfig}
_TOP_KEYS = {"train_data", "test_data", "out_dir", *_SECTIONS}


@dataclasses.dataclass
class RunConfig:
    """Everything ``train`` needs; every field has a default."""

    train_data: str | None = None
    test_data: str | None = None
    out_dir: str = "runs/chbc"
    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    enhancement: dict = dataclasses.field(default_factory=dict)
    consistency: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(obj) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for section, kind in _SECTIONS.items():
            body = obj.get(section, {})
            if not isinstance(body, dict):
                raise ConfigError(f"config section '{section}' must be an object")
            allowed = {f.name for f in dataclasses.fields(kind)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown keys in '{section}': {sorted(bad)}")
        return cls(**obj)

    def build(self, input_shape: list[int], level_sizes: list[int]):
        model_args = {"input_shape": input_shape, "level_sizes": level_sizes, **self.model}
        try:
            return (ModelConfig(**model_args), TrainConfig(**self.train),
                    EnhancementConfig(**self.enhancement), ConsistencyConfig(**self.consistency))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _read_json(path: str | Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from None


# -- subcommands ------------------------------------------------------------
def cmd_gen_synth(args) -> int:
    obj = _read_json(args.spec, "synth spec")
    if not isinstance(obj, dict):
        raise ConfigError("synth spec must be a JSON object")
    if args.seed is not None:
        obj["seed"] = args.seed
    elif os.environ.get("CHBC_SEED"):
        obj["seed"] = _env_seed()
    try:
        spec = SynthSpec.from_dict(obj)
    except TypeError as exc:
        raise ConfigError(f"synth spec: {exc}") from None
    ds, _ = generate_synthetic(spec)
    tr, te = train_test_split(ds, spec.test_fraction, spec.seed)
    out = Path(args.out_dir)
    save_dataset(tr, out / "train")
    save_dataset(te, out / "test")
    print(f"wrote {len(tr)} train / {len(te)} test samples to {out}")
    return 0


def _env_seed() -> int:
    raw = os.environ["CHBC_SEED"]
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"CHBC_SEED must be an integer, got {raw!r}") from None


def _apply_overrides(cfg: RunConfig, args) -> None:
    seed = args.seed if args.seed is not None else (_env_seed() if os.environ.get("CHBC_SEED") else None)
    if seed is not None:
        cfg.model["seed"] = seed
        cfg.train["seed"] = seed
    for flag, section, key in [("train_data", None, "train_data"), ("test_data", None, "test_data"),
                               ("out_dir", None, "out_dir"), ("epochs", "train", "epochs"),
                               ("batch_size", "train", "batch_size"), ("lr", "train", "lr0"),
                               ("schedule", "train", "schedule"), ("alpha", "enhancement", "alpha"),
                               ("mod_strategy", "enhancement", "mod_strategy"),
                               ("attention_source", "enhancement", "attention_source"),
                               ("feature_source", "enhancement", "feature_source"),
                               ("temperature", "consistency", "temperature"),
                               ("strategy", "consistency", "strategy"),
                               ("distance", "consistency", "distance")]:
        value = getattr(args, flag, None)
        if value is None:
            continue
        if section is None:
            setattr(cfg, key, value)
        else:
            getattr(cfg, section)[key] = value
    if args.no_mge:
        cfg.enhancement["enabled"] = False
    if args.no_cbc:
        cfg.consistency["enabled"] = False


def cmd_train(args) -> int:
    cfg = RunConfig.from_dict(_read_json(args.config, "config")) if args.config else RunConfig()
    _apply_overrides(cfg, args)
    if not cfg.train_data:
        raise ConfigError("train_data is not set (config key or --train-data)")
    train_ds = load_dataset(cfg.train_data)
    test_ds = load_dataset(cfg.test_data) if cfg.test_data else None
    if test_ds is not None and test_ds.hierarchy != train_ds.hierarchy:
        raise DataError("train and test datasets use different hierarchies")
    model_cfg, train_cfg, enh, con = cfg.build(train_ds.input_shape, list(train_ds.hierarchy.level_sizes))
    model = ChbcModel(model_cfg, enh, con)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=1), encoding="utf-8")
    train(model, train_ds, train_cfg, eval_data=test_ds, out_dir=out)
    report = json.loads((out / "eval_report.json").read_text(encoding="utf-8"))
    print(EvalReport.from_dict(report).format_table())
    print(f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.json").is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model, _ = load_checkpoint(ckpt)
    ds = load_dataset(args.dataset)
    if list(ds.hierarchy.level_sizes) != model.config.level_sizes:
        raise DataError(f"dataset levels {list(ds.hierarchy.level_sizes)} != model {model.config.level_sizes}")
    report = evaluate(model, ds)
    out = Path(args.out) if args.out else ckpt / "eval_report.json"
    out.write_text(report.to_json(), encoding="utf-8")
    print(report.format_table())
    if args.export_masks:
        masks = [[] for _ in range(model.depth)]
        for start in range(0, len(ds), 256):
            fwd = model.forward(ds.inputs[start:start + 256])
            for i, m in enumerate(fwd.mge.attention_enhanced):
                masks[i].append(m.data)
        export_masks([nx.Tensor(np.concatenate(m)) for m in masks], args.export_masks)
    return 0


def read_logits(path: str | Path) -> tuple[list[int], list[np.ndarray]]:
    """Read ``<stem>.f32`` with sidecar ``<stem>.json`` into per-level ``N x c_i`` blocks."""
    path = Path(path)
    meta = _read_json(path.with_suffix(".json"), "logits sidecar")
    try:
        levels = [int(c) for c in meta["levels"]]
        n = int(meta["num_samples"])
    except (KeyError, TypeError, ValueError):
        raise DataError(f"{path.with_suffix('.json')}: need 'levels' and 'num_samples'") from None
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"logits file not found: {path}") from None
    expected = 4 * n * sum(levels)
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    blocks, offset = [], 0
    for c in levels:
        blocks.append(flat[offset:offset + n * c].reshape(n, c))
        offset += n * c
    return levels, blocks


def write_logits(path: str | Path, blocks: list[np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = blocks[0].shape[0]
    path.write_bytes(np.concatenate([b.astype("<f4").ravel() for b in blocks]).tobytes())
    meta = {"levels": [int(b.shape[1]) for b in blocks], "num_samples": int(n)}
    path.with_suffix(".json").write_text(json.dumps(meta), encoding="utf-8")


def cmd_project(args) -> int:
    th = load_hierarchy(args.hierarchy)
    levels, blocks = read_logits(args.logits)
    if levels != list(th.level_sizes):
        raise DataError(f"logits levels {levels} != hierarchy {list(th.level_sizes)}")
    src, dst = args.from_level, args.to_level
    if args.direction == "c2f" and not src < dst:
        raise ConfigError("c2f projects from a coarser level: need --from < --to")
    if args.direction == "f2c" and not src > dst:
        raise ConfigError("f2c projects from a finer level: need --from > --to")
    if not (1 <= src <= th.depth and 1 <= dst <= th.depth):
        raise ConfigError(f"levels must lie in 1..{th.depth}")
    block = nx.Tensor(blocks[src - 1])
    probs = block if args.input == "probs" else nx.softmax_t(block, args.temperature)
    if args.direction == "c2f":
        projected = coarse_to_fine(probs, th.adjacency(src, dst))
    else:
        projected = fine_to_coarse(probs, th.adjacency(dst, src))
    write_logits(args.out, [projected.data])
    print(f"wrote {projected.shape[0]} x {projected.shape[1]} distributions to {args.out}")
    return 0


def cmd_validate_hierarchy(args) -> int:
    th = load_hierarchy(args.file)
    print(f"depth: {th.depth}")
    print(f"level sizes: {list(th.level_sizes)}")
    for lv in range(1, th.depth):
        counts = th.children_counts(lv)
        print(f"level {lv} -> {lv + 1}: children per node min={counts.min()} "
              f"mean={counts.mean():.2f} max={counts.max()}")
    return 0


def cmd_report(args) -> int:
    trail = TrainLog.read_jsonl(args.log)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    step_cols = ["epoch", "step", "lr", "loss_cls", "loss_con", "loss"]
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=step_cols, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(trail.steps())
    if args.epochs_out:
        evals = {r["epoch"]: r["report"] for r in trail.evals()}
        means = {k: trail.epoch_mean(k) for k in ("loss_cls", "loss_con", "loss")}
        with open(args.epochs_out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss_cls", "loss_con", "loss", "wa_acc", "tcr"])
            for e in range(len(means["loss"])):
                rep = evals.get(e, {})
                writer.writerow([e, means["loss_cls"][e], means["loss_con"][e], means["loss"][e],
                                 rep.get("wa_acc", ""), rep.get("tcr", "")])
    print(f"wrote {len(trail.steps())} step rows to {out}")
    return 0


# -- argument parsing -------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chbc", description="Hierarchical classification toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic train/test dataset pair")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("config", nargs="?")
    p.add_argument("--train-data")
    p.add_argument("--test-data")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=["exponential", "cosine"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--mod-strategy", choices=["MatOrth", "AddAll", "AddPre"])
    p.add_argument("--attention-source", choices=["previous", "first"])
    p.add_argument("--feature-source", choices=["previous", "first"])
    p.add_argument("--temperature", type=float)
    p.add_argument("--strategy", choices=["all", "neighbor", "finest"])
    p.add_argument("--distance", choices=["js", "kl"])
    p.add_argument("--no-mge", action="store_true", help="masks fixed at one, no enhancement")
    p.add_argument("--no-cbc", action="store_true", help="drop the consistency loss")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out")
    p.add_argument("--export-masks", metavar="DIR")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="project per-level distributions across the hierarchy")
    p.add_argument("logits")
    p.add_argument("hierarchy")
    p.add_argument("--direction", choices=["c2f", "f2c"], required=True)
    p.add_argument("--from", dest="from_level", type=int, required=True)
    p.add_argument("--to", dest="to_level", type=int, required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--input", choices=["logits", "probs"], default="logits")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("validate-hierarchy", help="check a hierarchy file")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate_hierarchy)

    p = sub.add_parser("report", help="turn train_log.jsonl into CSV series")
    p.add_argument("log")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs-out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ChbcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
