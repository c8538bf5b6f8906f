"""Splitting, training, evaluation metrics, confidence analysis, hypnograms
and channel/fusion ablations."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError, NumericalError
from .model import ModelConfig, ModelParams, forward_batch, init_params
from .numerics import Tape
from .preprocess import STAGE_INDEX, STAGES, EpochRecord, EpochSet

log = logging.getLogger(__name__)

# Plotting depth for hypnograms: wake on top, deep sleep at the bottom.
STAGE_LEVEL = {"W": 4, "REM": 3, "N1": 2, "N2": 1, "N3": 0}


def _from_dict(cls, data: Mapping):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def _as_epoch_set(data) -> EpochSet:
    if isinstance(data, EpochSet):
        return data
    return EpochSet.from_records(list(data))


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fr}")

    from_dict = classmethod(_from_dict)


@dataclass
class Split:
    train: list[int]
    val: list[int]
    test: list[int]
    warnings: list[str] = field(default_factory=list)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _cut(perm: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(perm)
    n_train = min(n, _round_half_up(n * spec.train_fraction))
    n_val = min(n - n_train, _round_half_up(n * spec.val_fraction))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def stratified_split(records, spec: SplitSpec = SplitSpec()) -> Split:
    """Per-stage shuffled 60/20/20 (by default) partition of epoch indices.

    Falls back to an unstratified split, with a warning entry, when a stage
    that occurs has fewer than 5 epochs.
    """
    if isinstance(records, EpochSet):
        labels = records.labels
    else:
        labels = np.array([STAGE_INDEX[r.label] for r in records], dtype=np.int64)
    if len(labels) == 0:
        raise InputError("cannot split an empty dataset")
    rng = nx.named_rng(spec.seed, "split")
    warnings = []
    counts = np.bincount(labels, minlength=len(STAGES))
    sparse = [STAGES[k] for k in range(len(STAGES)) if 0 < counts[k] < 5]
    parts: list[list[np.ndarray]] = [[], [], []]
    if spec.stratified and not sparse:
        for k in range(len(STAGES)):
            idx = np.flatnonzero(labels == k)
            if idx.size:
                for bucket, chunk in zip(parts, _cut(rng.permutation(idx), spec)):
                    bucket.append(chunk)
    else:
        if spec.stratified:
            msg = f"stages {sparse} have fewer than 5 epochs; using an unstratified split"
            log.warning(msg)
            warnings.append(msg)
        for bucket, chunk in zip(parts, _cut(rng.permutation(len(labels)), spec)):
            bucket.append(chunk)
    train, val, test = (sorted(int(i) for c in p for i in c) for p in parts)
    return Split(train, val, test, warnings)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    batch_size: int = 32
    max_epochs: int = 50
    early_stop_patience: int = 10
    seed: int = 0
    fusion_mode: str = "gmu"
    channel_subset: tuple[str, ...] = ()
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "channel_subset", tuple(self.channel_subset))
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs and early_stop_patience must be >= 1")
        if self.fusion_mode not in ("gmu", "concat"):
            raise ConfigError(f"fusion_mode must be 'gmu' or 'concat', got {self.fusion_mode!r}")

    from_dict = classmethod(_from_dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_subset"] = list(self.channel_subset)
        return d


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_acc: float


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    steps: int = 0
    stop_reason: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_acc"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.loss), repr(e.val_acc)])
        return buf.getvalue()


def resolve_model_config(model_config: ModelConfig, data: EpochSet, train_config: TrainConfig) -> ModelConfig:
    """Fit the model config to the dataset's channels and feature shapes."""
    channels = train_config.channel_subset or tuple(data.channel_names)
    missing = [c for c in channels if c not in data.channels]
    if missing:
        raise ConfigError(f"unknown channel(s) {missing}; dataset has {data.channel_names}")
    seq = {data.channels[c].shape[1] for c in channels}
    if len(seq) != 1:
        raise ConfigError(f"channels {channels} disagree on time length: {sorted(seq)}")
    return replace(
        model_config,
        channels=channels,
        input_dims=tuple(data.channels[c].shape[2] for c in channels),
        seq_len=seq.pop(),
        fusion=train_config.fusion_mode,
    )


def _batch_inputs(data: EpochSet, idx, channels) -> dict[str, np.ndarray]:
    return {ch: data.channels[ch][idx] for ch in channels}


def train(
    data,
    split: Split,
    model_config: ModelConfig,
    train_config: TrainConfig = TrainConfig(),
) -> tuple[ModelParams, TrainLog]:
    """Minibatch Adam on cross-entropy with best-validation-accuracy selection.

    Returns the parameters from the epoch with the highest validation
    accuracy (earliest on ties) and the per-epoch log.
    """
    data = _as_epoch_set(data)
    if not split.train or not split.val:
        raise InputError("training needs non-empty train and validation splits")
    cfg = resolve_model_config(model_config, data, train_config)
    seed = train_config.seed
    params = init_params(cfg, nx.named_rng(seed, "init"))
    shuffle_rng = nx.named_rng(seed, "shuffle")
    dropout_rng = nx.named_rng(seed, "dropout")
    tensors = params.parameters()
    state = nx.AdamState.for_params(tensors, lr=train_config.lr)
    train_idx = np.asarray(split.train, dtype=np.int64)
    val = data.subset(split.val)
    onehot = np.eye(cfg.num_classes)

    tlog = TrainLog()
    best = params.copy()
    stale = 0
    for epoch in range(1, train_config.max_epochs + 1):
        order = shuffle_rng.permutation(train_idx)
        total = 0.0
        for b, start in enumerate(range(0, len(order), train_config.batch_size)):
            idx = order[start : start + train_config.batch_size]
            with Tape() as tape:
                out = forward_batch(_batch_inputs(data, idx, cfg.channels), params, True, dropout_rng)
                loss = nx.cross_entropy_loss(out.logits, onehot[data.labels[idx]])
            value = loss.item()
            if not math.isfinite(value):
                lg = out.logits.data
                raise NumericalError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b} (size {len(idx)}); "
                    f"logits min {np.nanmin(lg):.4g} max {np.nanmax(lg):.4g}, "
                    f"non-finite logits {int((~np.isfinite(lg)).sum())}"
                )
            nx.backward(loss, tape)
            nx.adam_step(tensors, state)
            total += value * len(idx)
        val_acc = float(np.mean(predict(params, val, train_config.eval_batch_size).probs.argmax(1) == val.labels))
        tlog.epochs.append(EpochLog(epoch, total / len(order), val_acc))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, total / len(order), val_acc)
        if val_acc > tlog.best_val_acc:
            tlog.best_val_acc, tlog.best_epoch = val_acc, epoch
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= train_config.early_stop_patience:
                tlog.stop_reason = f"no validation improvement for {stale} epochs"
                break
    tlog.steps = state.step_count
    tlog.stop_reason = tlog.stop_reason or "max_epochs reached"
    return best, tlog


@dataclass
class Prediction:
    probs: np.ndarray
    gates: dict[str, np.ndarray]
    fused: np.ndarray
    channel_features: dict[str, np.ndarray]

    @property
    def predicted(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def predict(params: ModelParams, data, batch_size: int = 256) -> Prediction:
    """Eval-mode forward pass over a dataset, in batches."""
    data = _as_epoch_set(data)
    if len(data) == 0:
        raise InputError("nothing to predict")
    cfg = params.config
    chunks = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        chunks.append(forward_batch(_batch_inputs(data, idx, cfg.channels), params))
    return Prediction(
        probs=np.concatenate([c.probs for c in chunks]),
        gates={ch: np.concatenate([c.gates[ch] for c in chunks]) for ch in chunks[0].gates},
        fused=np.concatenate([c.fused for c in chunks]),
        channel_features={ch: np.concatenate([c.channel_features[ch] for c in chunks]) for ch in cfg.channels},
    )


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    """Rows are true stages, columns predicted stages."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, truth, predicted, num_classes: int = len(STAGES)) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        if truth.shape != predicted.shape:
            raise InputError(f"{truth.size} true labels vs {predicted.size} predictions")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (truth, predicted), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    accuracy: float
    kappa: float
    mf1: float
    mean_sensitivity: float
    mean_specificity: float
    per_class_f1: dict[str, float]
    per_class_sensitivity: dict[str, float]
    per_class_specificity: dict[str, float]
    absent_classes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den != 0)
    return out


def metrics_from_confusion(cm: ConfusionMatrix, class_names: Sequence[str] = STAGES) -> MetricsReport:
    """Overall and per-class scores; any 0/0 ratio is reported as 0."""
    c = cm.counts.astype(np.float64)
    n = c.sum()
    if n == 0:
        raise InputError("confusion matrix is empty")
    tp = np.diag(c)
    row, col = c.sum(axis=1), c.sum(axis=0)
    fp, fn = col - tp, row - tp
    tn = n - tp - fp - fn
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    specificity = _safe_div(tn, tn + fp)
    p_o = tp.sum() / n
    p_e = float(np.sum((row / n) * (col / n)))
    if p_e == 1.0:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    names = list(class_names)
    return MetricsReport(
        accuracy=float(p_o),
        kappa=float(kappa),
        mf1=float(f1.mean()),
        mean_sensitivity=float(recall.mean()),
        mean_specificity=float(specificity.mean()),
        per_class_f1=dict(zip(names, f1.tolist())),
        per_class_sensitivity=dict(zip(names, recall.tolist())),
        per_class_specificity=dict(zip(names, specificity.tolist())),
        absent_classes=[s for s, r, k in zip(names, row, col) if r == 0 and k == 0],
    )


def evaluate(params: ModelParams, records, batch_size: int = 256) -> tuple[MetricsReport, ConfusionMatrix]:
    data = _as_epoch_set(records)
    if len(data) == 0:
        raise InputError("no epochs to evaluate")
    pred = predict(params, data, batch_size).predicted
    cm = ConfusionMatrix.from_labels(data.labels, pred, params.config.num_classes)
    return metrics_from_confusion(cm), cm


def metrics_json(report: MetricsReport, cm: ConfusionMatrix, extra: Mapping | None = None) -> str:
    doc = {"metrics": report.to_dict(), "confusion": {"classes": list(STAGES), "counts": cm.counts.tolist()}}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# confidence


@dataclass
class ConfidenceSeries:
    epoch_index: np.ndarray
    predicted: np.ndarray
    max_prob: np.ndarray
    probs: np.ndarray
    correct: np.ndarray

    @classmethod
    def from_probs(cls, probs, truth, epoch_index=None) -> "ConfidenceSeries":
        probs = np.asarray(probs, dtype=np.float64)
        truth = np.asarray(truth, dtype=np.int64)
        if epoch_index is None:
            epoch_index = np.arange(len(truth))
        pred = probs.argmax(axis=1)
        return cls(np.asarray(epoch_index), pred, probs.max(axis=1), probs, pred == truth)

    def __len__(self) -> int:
        return len(self.max_prob)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "maxprob", "correct"])
        for e, p, c in zip(self.epoch_index, self.max_prob, self.correct):
            w.writerow([int(e), repr(float(p)), int(bool(c))])
        return buf.getvalue()


@dataclass
class ThresholdSummary:
    threshold: float
    count_above: int
    fraction_above: float
    accuracy_above: float | None
    accuracy_below: float | None
    quantiles_above: dict[str, float] | None


def confidence_estimate(series: ConfidenceSeries, thresholds: Sequence[float] = (0.4, 0.5, 0.6)) -> list[ThresholdSummary]:
    """Share, accuracy and spread of predictions whose confidence exceeds each threshold."""
    if len(series) == 0:
        raise InputError("empty confidence series")
    out = []
    for t in thresholds:
        above = series.max_prob > t
        n_above = int(above.sum())
        below = ~above
        q = None
        if n_above:
            vals = series.max_prob[above]
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            q = {
                "min": float(vals.min()),
                "q1": float(q1),
                "median": float(med),
                "q3": float(q3),
                "mean": float(vals.mean()),
                "max": float(vals.max()),
            }
        out.append(
            ThresholdSummary(
                threshold=float(t),
                count_above=n_above,
                fraction_above=n_above / len(series),
                accuracy_above=float(series.correct[above].mean()) if n_above else None,
                accuracy_below=float(series.correct[below].mean()) if below.any() else None,
                quantiles_above=q,
            )
        )
    return out


# ---------------------------------------------------------------------------
# hypnogram


def _stage_names(values) -> list[str]:
    out = []
    for v in values:
        if isinstance(v, (int, np.integer)):
            out.append(STAGES[int(v)])
        elif v in STAGE_INDEX:
            out.append(str(v))
        else:
            raise InputError(f"unknown stage {v!r}")
    return out


@dataclass
class Hypnogram:
    epoch_index: list[int]
    truth: list[str]
    predicted: list[str]

    def __len__(self) -> int:
        return len(self.epoch_index)

    @property
    def mismatches(self) -> int:
        return sum(t != p for t, p in zip(self.truth, self.predicted))

    def levels(self) -> tuple[list[int], list[int]]:
        return [STAGE_LEVEL[s] for s in self.truth], [STAGE_LEVEL[s] for s in self.predicted]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "true", "pred"])
        for row in zip(self.epoch_index, self.truth, self.predicted):
            w.writerow(row)
        return buf.getvalue()


def hypnogram_export(truth, predicted, epoch_index=None) -> Hypnogram:
    """Pair true and predicted stages in epoch order."""
    truth, predicted = _stage_names(truth), _stage_names(predicted)
    if len(truth) != len(predicted):
        raise InputError(f"{len(truth)} true stages vs {len(predicted)} predictions")
    idx = list(range(len(truth))) if epoch_index is None else [int(i) for i in epoch_index]
    if len(idx) != len(truth):
        raise InputError("epoch_index length does not match the stage sequences")
    order = sorted(range(len(idx)), key=idx.__getitem__)
    idx = [idx[i] for i in order]
    if any(a == b for a, b in zip(idx, idx[1:])):
        raise InputError("duplicate epoch indices")
    return Hypnogram(idx, [truth[i] for i in order], [predicted[i] for i in order])


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class Variant:
    name: str
    channels: tuple[str, ...] = ()
    fusion: str = "gmu"

    @classmethod
    def from_dict(cls, d: Mapping) -> "Variant":
        v = _from_dict(cls, d)
        return replace(v, channels=tuple(v.channels))


@dataclass
class AblationRow:
    variant: Variant
    metrics: MetricsReport
    confusion: ConfusionMatrix
    mean_gates: dict[str, float]
    log: TrainLog
    params: ModelParams | None = None


def ablation_run(
    data,
    split: Split,
    model_config: ModelConfig,
    train_config: TrainConfig,
    variants: Sequence[Variant],
    keep_params: bool = False,
) -> list[AblationRow]:
    """Train and test every channel-subset / fusion variant on one shared split."""
    data = _as_epoch_set(data)
    for v in variants:
        unknown = [c for c in v.channels if c not in data.channels]
        if unknown:
            raise ConfigError(f"variant {v.name!r}: unknown channel(s) {unknown}")
        if v.fusion not in ("gmu", "concat"):
            raise ConfigError(f"variant {v.name!r}: fusion must be 'gmu' or 'concat'")
    test = data.subset(split.test)
    rows = []
    for v in variants:
        tc = replace(train_config, channel_subset=v.channels or train_config.channel_subset, fusion_mode=v.fusion)
        params, tlog = train(data, split, model_config, tc)
        pred = predict(params, test, tc.eval_batch_size)
        cm = ConfusionMatrix.from_labels(test.labels, pred.predicted, params.config.num_classes)
        gates = {ch: float(g.mean()) for ch, g in pred.gates.items()}
        rows.append(AblationRow(v, metrics_from_confusion(cm), cm, gates, tlog, params if keep_params else None))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "channels", "fusion", "acc", "kappa", "mf1", "sens", "spec"]
               + [f"f1_{s}" for s in STAGES] + ["mean_gates"])
    for r in rows:
        m = r.metrics
        gates = ";".join(f"{k}={v!r}" for k, v in r.mean_gates.items())
        w.writerow(
            [r.variant.name, "+".join(r.variant.channels), r.variant.fusion]
            + [repr(x) for x in (m.accuracy, m.kappa, m.mf1, m.mean_sensitivity, m.mean_specificity)]
            + [repr(m.per_class_f1[s]) for s in STAGES]
            + [gates]
        )
    return buf.getvalue()
