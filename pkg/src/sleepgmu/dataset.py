"""On-disk dataset artifacts and raw CSV ingestion.

A dataset directory holds one binary tensor file per channel plus
``labels.bin`` and ``epoch_index.bin``, described by ``manifest.json``.
Tensor files are ``SGMUTNSR``, a version byte, a little-endian u32 rank,
u32 dimensions and a little-endian float64 payload.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError, ValidationError
from .preprocess import (
    EPOCH_SECONDS,
    STAGES,
    EpochRecord,
    EpochSet,
    RawChannelSignal,
    WearableStreams,
    align_wearable,
    normalize_channels,
    psg_epoch_features,
    relabel_epochs,
    split_epochs,
)

TENSOR_MAGIC = b"SGMUTNSR"
TENSOR_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEARABLE_CHANNELS = ("respiration", "heart_rate", "steps")


def write_tensor(path, array) -> None:
    a = np.ascontiguousarray(array, dtype="<f8")
    head = TENSOR_MAGIC + struct.pack("<BI", TENSOR_VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(head + a.tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise ValidationError(f"{path}: not a tensor file")
    off = len(TENSOR_MAGIC)
    version, ndim = struct.unpack_from("<BI", raw, off)
    if version != TENSOR_VERSION:
        raise ValidationError(f"{path}: unsupported tensor version {version}")
    off += struct.calcsize("<BI")
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(raw) - off != expected:
        raise ValidationError(f"{path}: payload is {len(raw) - off} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


@dataclass
class ChannelSpec:
    name: str
    kind: str
    time_steps: int
    features: int
    file: str


@dataclass
class DatasetManifest:
    name: str
    channels: list[ChannelSpec]
    epoch_count: int
    stage_histogram: dict[str, int]
    source_files: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    excluded_count: int = 0
    labels_file: str = "labels.bin"
    index_file: str = "epoch_index.bin"

    def __post_init__(self):
        self.channels = [c if isinstance(c, ChannelSpec) else ChannelSpec(**c) for c in self.channels]
        if sum(self.stage_histogram.values()) != self.epoch_count:
            raise ValidationError(
                f"stage histogram sums to {sum(self.stage_histogram.values())}, epoch count is {self.epoch_count}"
            )

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.channels]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def save_dataset(
    directory,
    data: EpochSet,
    name: str,
    kinds: Mapping[str, str],
    source_files: Sequence[str] = (),
    provenance: Mapping | None = None,
    excluded_count: int = 0,
) -> DatasetManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    specs = []
    for ch, arr in data.channels.items():
        fname = f"{ch}.bin"
        write_tensor(directory / fname, arr)
        specs.append(ChannelSpec(ch, kinds.get(ch, "spectrogram"), int(arr.shape[1]), int(arr.shape[2]), fname))
    manifest = DatasetManifest(
        name=name,
        channels=specs,
        epoch_count=len(data),
        stage_histogram=data.stage_histogram(),
        source_files=list(source_files),
        provenance=dict(provenance or {}),
        excluded_count=excluded_count,
    )
    write_tensor(directory / manifest.labels_file, data.labels)
    write_tensor(directory / manifest.index_file, data.epoch_index)
    (directory / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest


def load_manifest(directory) -> DatasetManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    try:
        doc = json.loads(path.read_text())
        return DatasetManifest(**doc)
    except (TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: malformed manifest ({exc})") from exc


def load_dataset(directory) -> tuple[EpochSet, DatasetManifest]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    labels = read_tensor(directory / manifest.labels_file)
    index = read_tensor(directory / manifest.index_file)
    if labels.shape != (manifest.epoch_count,) or index.shape != labels.shape:
        raise ValidationError(f"{directory}: label/index arrays do not match epoch count {manifest.epoch_count}")
    if np.any(labels != np.round(labels)) or labels.min(initial=0) < 0 or labels.max(initial=0) >= len(STAGES):
        raise ValidationError(f"{directory}: labels must be stage indices 0..{len(STAGES) - 1}")
    chans = {}
    for spec in manifest.channels:
        arr = read_tensor(directory / spec.file)
        if arr.shape != (manifest.epoch_count, spec.time_steps, spec.features):
            raise ValidationError(f"{directory}: channel {spec.name!r} has shape {arr.shape}, manifest disagrees")
        chans[spec.name] = arr
    data = EpochSet(chans, labels.astype(np.int64), index.astype(np.int64))
    if data.stage_histogram() != manifest.stage_histogram:
        raise ValidationError(f"{directory}: stage histogram does not match labels")
    return data, manifest


# ---------------------------------------------------------------------------
# CSV ingestion


def _rows(path, header: Sequence[str]):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != list(header):
            raise InputError(f"{path}:1: expected header {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, [c.strip() for c in row]


def read_signal_csv(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``timestamp,channel,value`` rows -> channel -> (times, values) sorted by time."""
    cols: dict[str, tuple[list, list]] = {}
    for line, (ts, ch, val) in _rows(path, ("timestamp", "channel", "value")):
        try:
            t, v = float(ts), float(val)
        except ValueError:
            raise InputError(f"{path}:{line}: non-numeric timestamp or value") from None
        if not ch:
            raise InputError(f"{path}:{line}: empty channel name")
        cols.setdefault(ch, ([], []))
        cols[ch][0].append(t)
        cols[ch][1].append(v)
    if not cols:
        raise InputError(f"{path}: no samples")
    out = {}
    for ch, (t, v) in cols.items():
        t, v = np.asarray(t), np.asarray(v)
        order = np.argsort(t, kind="stable")
        out[ch] = (t[order], v[order])
    return out


def read_labels_csv(path) -> list[tuple[int, str]]:
    """``epoch_index,stage`` rows, in file order."""
    out = []
    seen = set()
    for line, (idx, stage) in _rows(path, ("epoch_index", "stage")):
        try:
            k = int(idx)
        except ValueError:
            raise InputError(f"{path}:{line}: epoch_index must be an integer") from None
        if k < 0 or k in seen:
            raise InputError(f"{path}:{line}: negative or duplicate epoch_index {k}")
        seen.add(k)
        out.append((k, stage))
    if not out:
        raise InputError(f"{path}: no labels")
    return out


# ---------------------------------------------------------------------------
# raw recording -> EpochSet


@dataclass(frozen=True)
class PreprocessConfig:
    """How a raw recording directory is turned into epochs.

    ``mode`` is ``psg`` (uniformly sampled channels, detrend + spectrogram)
    or ``wearable`` (respiration / heart-rate / step streams, aligned).
    """

    mode: str = "psg"
    sample_rate_hz: float = 100.0
    channels: tuple[str, ...] = ()
    detrend_order: int = 1
    fft_size: int = 256
    window_seconds: float = 2.0
    overlap: float = 0.5
    wake_margin: int = 60
    wearable_rows: int = 30
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.mode not in ("psg", "wearable"):
            raise ValidationError(f"preprocess mode must be 'psg' or 'wearable', got {self.mode!r}")


def _psg_epochs(signals, labels, cfg: PreprocessConfig) -> tuple[EpochSet, int]:
    names = list(cfg.channels) or sorted(signals)
    missing = [c for c in names if c not in signals]
    if missing:
        raise ValidationError(f"channels {missing} not present in signals; found {sorted(signals)}")
    relabeled = relabel_epochs([s for _, s in labels], cfg.wake_margin)
    wanted = [(k, s) for (k, _), s, keep in zip(labels, relabeled.stages, relabeled.keep) if keep]
    per_channel = {}
    for ch in names:
        t, v = signals[ch]
        sig = RawChannelSignal(ch, cfg.sample_rate_hz, v, float(t[0]))
        per_channel[ch] = split_epochs(sig, [k for k, _ in wanted])
    records = []
    for k, stage in wanted:
        if all(k in per_channel[ch] for ch in names):
            feats = {
                ch: psg_epoch_features(
                    per_channel[ch][k], cfg.sample_rate_hz, cfg.detrend_order, cfg.fft_size, cfg.window_seconds, cfg.overlap
                )
                for ch in names
            }
            records.append(EpochRecord(feats, stage, k))
    excluded = len(wanted) - len(records)
    if not records:
        raise InputError("preprocessing produced no epochs")
    return EpochSet.from_records(records), excluded


def _wearable_epochs(signals, labels, cfg: PreprocessConfig) -> tuple[EpochSet, int, int]:
    missing = [c for c in ("respiration", "heart_rate") if c not in signals]
    if missing:
        raise ValidationError(f"wearable input lacks channel(s) {missing}")
    relabeled = relabel_epochs([s for _, s in labels], cfg.wake_margin)
    kept = [(k * EPOCH_SECONDS, s) for (k, _), s, keep in zip(labels, relabeled.stages, relabeled.keep) if keep]
    steps_t, steps_v = signals.get("steps", (np.empty(0), np.empty(0)))
    streams = WearableStreams(
        *signals["respiration"], *signals["heart_rate"], list(zip(steps_t.tolist(), steps_v.tolist())), kept
    )
    records, report = align_wearable(streams, cfg.wearable_rows)
    if not records:
        raise InputError("preprocessing produced no epochs")
    index = [int(labels_k) for labels_k in (k for (k, _), keep in zip(labels, relabeled.keep) if keep)]
    records = [EpochRecord(normalize_channels(r).channels, r.label, index[r.epoch_index]) for r in records]
    return EpochSet.from_records(records), report.excluded_count, report.interpolated_slots


def preprocess_directory(input_dir, out_dir, cfg: PreprocessConfig, seed: int = 0) -> DatasetManifest:
    """Read ``signals.csv`` + ``labels.csv`` and write a dataset artifact."""
    input_dir = Path(input_dir)
    sig_path, lab_path = input_dir / "signals.csv", input_dir / "labels.csv"
    for p in (sig_path, lab_path):
        if not p.is_file():
            raise FileNotFoundError(f"missing input file {p}")
    signals = read_signal_csv(sig_path)
    labels = read_labels_csv(lab_path)
    provenance = {"mode": cfg.mode, "seed": seed, "wake_margin": cfg.wake_margin}
    if cfg.mode == "psg":
        data, excluded = _psg_epochs(signals, labels, cfg)
        kinds = {ch: "spectrogram" for ch in data.channels}
        provenance.update(
            detrend_order=cfg.detrend_order,
            fft_size=cfg.fft_size,
            window_seconds=cfg.window_seconds,
            overlap=cfg.overlap,
            sample_rate_hz=cfg.sample_rate_hz,
        )
    else:
        data, excluded, interpolated = _wearable_epochs(signals, labels, cfg)
        kinds = {ch: "timeseries" for ch in data.channels}
        provenance.update(rows=cfg.wearable_rows, interpolated_slots=interpolated)
    return save_dataset(
        out_dir, data, cfg.name, kinds, [sig_path.name, lab_path.name], provenance, excluded_count=excluded
    )
