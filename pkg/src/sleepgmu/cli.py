"""``sleepgmu`` command-line interface.

Every command takes ``--config`` (JSON RunConfig), ``--seed`` and ``--out``.
Outputs are deterministic for a given seed; wall-clock times go only to
``timestamps.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from .dataset import DatasetManifest, PreprocessConfig, load_dataset, preprocess_directory, save_dataset
from .errors import ConfigError, NumericalError, SleepGMUError, ValidationError
from .model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .preprocess import STAGES, EpochSet
from .synth import SynthSpec, generate
from .trainer import (
    ConfidenceSeries,
    Split,
    SplitSpec,
    TrainConfig,
    Variant,
    ablation_csv,
    ablation_run,
    confidence_estimate,
    evaluate,
    hypnogram_export,
    metrics_json,
    predict,
    stratified_split,
    train,
)

log = logging.getLogger("sleepgmu")

EXIT_OK, EXIT_FAILURE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.sgmu"
_MODEL_SHAPE_KEYS = ("channels", "input_dims", "seq_len")


def _reject_unknown(section: str, data: Mapping, allowed) -> None:
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


@dataclass
class RunConfig:
    """Everything a command needs besides its positional paths.

    ``model`` keeps the raw model overrides: ``channels`` selects dataset
    channels, ``input_dims``/``seq_len`` are checked against the manifest,
    and all other keys go to :class:`ModelConfig`.
    """

    seed: int = 0
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    ablation: list[Variant] = field(default_factory=list)
    paths: dict = field(default_factory=dict)

    SECTIONS = ("seed", "model", "train", "split", "preprocess", "synth", "ablation", "paths")
    PATH_KEYS = ("data", "checkpoint", "input")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RunConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("config must be a JSON object")
        _reject_unknown("config", doc, cls.SECTIONS)
        for name in ("train", "split", "preprocess", "synth", "model", "paths"):
            sec = doc.get(name, {})
            if not isinstance(sec, Mapping):
                raise ConfigError(f"config section {name!r} must be an object")
            if "seed" in sec:
                raise ConfigError(f"{name}.seed is not allowed; use the top-level seed")
        model = dict(doc.get("model", {}))
        ModelConfig.from_dict({k: v for k, v in model.items() if k not in _MODEL_SHAPE_KEYS})
        paths = dict(doc.get("paths", {}))
        _reject_unknown("paths", paths, cls.PATH_KEYS)
        pre = dict(doc.get("preprocess", {}))
        _reject_unknown("preprocess", pre, PreprocessConfig.__dataclass_fields__)
        variants = doc.get("ablation", [])
        if not isinstance(variants, list):
            raise ConfigError("ablation must be a list of variants")
        return cls(
            seed=int(doc.get("seed", 0)),
            model=model,
            train=TrainConfig.from_dict(doc.get("train", {})),
            split=SplitSpec.from_dict(doc.get("split", {})),
            preprocess=PreprocessConfig(**pre),
            synth=SynthSpec.from_dict(doc.get("synth", {})),
            ablation=[Variant.from_dict(v) for v in variants],
            paths=paths,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed))

    @property
    def train_config(self) -> TrainConfig:
        tc = replace(self.train, seed=self.seed)
        if not tc.channel_subset and "channels" in self.model:
            tc = replace(tc, channel_subset=tuple(self.model["channels"]))
        return tc

    @property
    def split_spec(self) -> SplitSpec:
        return replace(self.split, seed=self.seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({k: v for k, v in self.model.items() if k not in _MODEL_SHAPE_KEYS})

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        split = asdict(self.split)
        pre = asdict(self.preprocess)
        pre["channels"] = list(self.preprocess.channels)
        for d in (train, split):
            d.pop("seed")
        return {
            "seed": self.seed,
            "model": self.model,
            "train": train,
            "split": split,
            "preprocess": pre,
            "synth": self.synth.to_dict(),
            "ablation": [dict(asdict(v), channels=list(v.channels)) for v in self.ablation],
            "paths": self.paths,
        }


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


def check_manifest(cfg: RunConfig, manifest: DatasetManifest) -> None:
    """Reject configs that name channels or shapes the dataset does not have."""
    specs = {c.name: c for c in manifest.channels}
    wanted = list(cfg.train_config.channel_subset) or list(specs)
    missing = [c for c in wanted if c not in specs]
    if missing:
        raise ValidationError(f"config names channel(s) {missing}; dataset has {manifest.channel_names}")
    for v in cfg.ablation:
        bad = [c for c in v.channels if c not in specs]
        if bad:
            raise ValidationError(f"ablation variant {v.name!r} names unknown channel(s) {bad}")
    if "input_dims" in cfg.model:
        dims = [specs[c].features for c in wanted]
        if list(cfg.model["input_dims"]) != dims:
            raise ValidationError(f"config input_dims {cfg.model['input_dims']} != dataset features {dims}")
    if "seq_len" in cfg.model:
        steps = {specs[c].time_steps for c in wanted}
        if steps != {cfg.model["seq_len"]}:
            raise ValidationError(f"config seq_len {cfg.model['seq_len']} != dataset time steps {sorted(steps)}")


# ---------------------------------------------------------------------------
# output helpers


class RunDir:
    def __init__(self, path, cfg: RunConfig, command: str):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.started = datetime.now(timezone.utc).isoformat()
        self.write_text("run_config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_text(self, name: str, text: str) -> Path:
        p = self.path / name
        p.write_text(text)
        return p

    def write_json(self, name: str, doc) -> Path:
        return self.write_text(name, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def finish(self) -> None:
        stamp = {"command": self.command, "started": self.started, "finished": datetime.now(timezone.utc).isoformat()}
        (self.path / "timestamps.json").write_text(json.dumps(stamp, indent=2) + "\n")


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"{what} is required (command-line flag or config paths section)")
    return value


def _dataset(args, cfg: RunConfig) -> tuple[EpochSet, DatasetManifest]:
    path = Path(_require(args.data or cfg.paths.get("data"), "--data"))
    data, manifest = load_dataset(path)
    check_manifest(cfg, manifest)
    return data, manifest


def _checkpoint(args, cfg: RunConfig) -> tuple[ModelParams, dict]:
    path = Path(_require(args.checkpoint or cfg.paths.get("checkpoint"), "--checkpoint"))
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    return load_checkpoint(path)


def _split_doc(split: Split) -> dict:
    return {"train": split.train, "val": split.val, "test": split.test, "warnings": split.warnings}


def confidence_summary(series: ConfidenceSeries) -> list[dict]:
    return [asdict(s) for s in confidence_estimate(series)]


def _predictions_csv(epoch_index, probs: np.ndarray, gates: Mapping[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "pred"] + [f"p_{s}" for s in STAGES] + [f"gate_{ch}" for ch in gates])
    pred = probs.argmax(axis=1)
    for i, e in enumerate(epoch_index):
        row = [int(e), STAGES[pred[i]]] + [repr(float(p)) for p in probs[i]]
        row += [repr(float(g[i].mean())) for g in gates.values()]
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> None:
    run = RunDir(args.out, cfg, "synth")
    data = generate(cfg.synth, cfg.seed)
    kinds = {c.name: c.kind for c in cfg.synth.channels}
    provenance = {"generator": "synth", "seed": cfg.seed, "spec": cfg.synth.to_dict()}
    save_dataset(run.path, data, "synthetic", kinds, [], provenance)
    run.finish()


def cmd_preprocess(args, cfg: RunConfig) -> None:
    src = _require(args.input or cfg.paths.get("input"), "--input")
    run = RunDir(args.out, cfg, "preprocess")
    manifest = preprocess_directory(src, run.path, cfg.preprocess, cfg.seed)
    log.info("preprocessed %d epochs (%d excluded)", manifest.epoch_count, manifest.excluded_count)
    run.finish()


def cmd_train(args, cfg: RunConfig) -> None:
    data, _ = _dataset(args, cfg)
    run = RunDir(args.out, cfg, "train")
    split = stratified_split(data, cfg.split_spec)
    params, tlog = train(data, split, cfg.model_config(), cfg.train_config)
    extra = {"split": _split_doc(split), "best_epoch": tlog.best_epoch, "best_val_acc": tlog.best_val_acc}
    save_checkpoint(run.path / CHECKPOINT_NAME, params, seed=cfg.seed, step=tlog.steps, extra=extra)
    run.write_text("train_log.csv", tlog.to_csv())
    run.write_json("split.json", _split_doc(split))
    run.finish()


def _eval_subset(data: EpochSet, header: dict, which: str) -> EpochSet:
    if which == "all":
        return data
    split = (header.get("extra") or {}).get("split")
    if split is None:
        raise ValidationError("checkpoint carries no split; use --split all")
    idx = split[which]
    if idx and max(idx) >= len(data):
        raise ValidationError("checkpoint split does not fit this dataset")
    return data.subset(idx)


def cmd_eval(args, cfg: RunConfig) -> None:
    data, _ = _dataset(args, cfg)
    params, header = _checkpoint(args, cfg)
    run = RunDir(args.out, cfg, "eval")
    subset = _eval_subset(data, header, args.split)
    report, cm = evaluate(params, subset)
    pred = predict(params, subset)
    run.write_text("metrics.json", metrics_json(report, cm, {"split": args.split, "epochs": len(subset)}))
    hyp = hypnogram_export(subset.labels, pred.predicted, subset.epoch_index)
    run.write_text("hypnogram.csv", hyp.to_csv())
    series = ConfidenceSeries.from_probs(pred.probs, subset.labels, subset.epoch_index)
    run.write_text("confidence.csv", series.to_csv())
    run.write_json("confidence_summary.json", confidence_summary(series))
    run.finish()


def cmd_predict(args, cfg: RunConfig) -> None:
    data, _ = _dataset(args, cfg)
    params, _ = _checkpoint(args, cfg)
    run = RunDir(args.out, cfg, "predict")
    pred = predict(params, data)
    run.write_text("predictions.csv", _predictions_csv(data.epoch_index, pred.probs, pred.gates))
    run.finish()


def cmd_ablate(args, cfg: RunConfig) -> None:
    data, _ = _dataset(args, cfg)
    variants = cfg.ablation or [Variant("all", (), cfg.train_config.fusion_mode)]
    run = RunDir(args.out, cfg, "ablate")
    split = stratified_split(data, cfg.split_spec)
    rows = ablation_run(data, split, cfg.model_config(), cfg.train_config, variants)
    run.write_text("ablation.csv", ablation_csv(rows))
    for r in rows:
        run.write_text(f"metrics_{r.variant.name}.json", metrics_json(r.metrics, r.confusion, {"mean_gates": r.mean_gates}))
        run.write_text(f"train_log_{r.variant.name}.csv", r.log.to_csv())
    run.write_json("split.json", _split_doc(split))
    run.finish()


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sleepgmu", description="Multichannel sleep staging with gated fusion.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="RunConfig JSON file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="root seed; overrides the config's seed")
        p.add_argument("--out", required=True, help="output directory")
        if name == "preprocess":
            p.add_argument("--input", help="directory with signals.csv and labels.csv")
        if name in ("train", "eval", "predict", "ablate"):
            p.add_argument("--data", help="dataset directory")
        if name in ("eval", "predict"):
            p.add_argument("--checkpoint", help="checkpoint file or train run directory")
        if name == "eval":
            p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("GMU_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        COMMANDS[args.command](args, cfg)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SleepGMUError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
