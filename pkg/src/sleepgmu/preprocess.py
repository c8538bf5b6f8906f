"""Signal preprocessing: detrending, log-power spectrograms, normalisation,
label clean-up and wearable-stream alignment into 30 s epochs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError, NumericalError, ShapeError, ValidationError

STAGES: tuple[str, ...] = ("W", "N1", "N2", "N3", "REM")
STAGE_INDEX = {s: i for i, s in enumerate(STAGES)}

EPOCH_SECONDS = 30.0
RESP_PERIOD = 0.02
HR_PERIOD = 5.0
RESP_SLOTS = 1500
HR_SLOTS = 6

LOG_FLOOR = 1e-10
MAX_CONDITION = 1e12

# Rechtschaffen & Kales scoring plus already-merged AASM names.
_RAW_STAGE_MAP = {
    "W": "W",
    "S1": "N1",
    "S2": "N2",
    "S3": "N3",
    "S4": "N3",
    "N1": "N1",
    "N2": "N2",
    "N3": "N3",
    "N4": "N3",
    "REM": "REM",
    "R": "REM",
    "MOVEMENT": None,
    "UNKNOWN": None,
}

# Integer stage codes used by the wrist-worn device recordings.
WEARABLE_STAGE_CODES = {0: "W", 1: "N1", 2: "N2", 3: "N3", 4: "N3", 5: "REM"}


@dataclass(frozen=True)
class RawChannelSignal:
    channel_name: str
    sample_rate_hz: float
    samples: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ConfigError(f"{self.channel_name}: sample rate must be positive")
        if len(self.samples) == 0:
            raise InputError(f"{self.channel_name}: no samples")


@dataclass(frozen=True)
class PolyFit:
    order: int
    coefficients: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return sum(c * x**j for j, c in enumerate(self.coefficients))


@dataclass(frozen=True)
class NormalizationParams:
    min: float
    max: float
    mu: float
    sigma: float


@dataclass
class EpochRecord:
    """One 30 s multimodal sample: channel name -> (T, F) feature matrix."""

    channels: dict[str, np.ndarray]
    label: str
    epoch_index: int = 0

    def __post_init__(self):
        if self.label not in STAGE_INDEX:
            raise ValidationError(f"epoch label must be one of {STAGES}, got {self.label!r}")
        lengths = {m.shape[0] for m in self.channels.values()}
        if len(lengths) > 1:
            raise ShapeError(f"channels disagree on time length: {sorted(lengths)}")


@dataclass
class EpochSet:
    """Column-stacked epochs: one (N, T, F) array per channel.

    This is the layout training and evaluation work on; ``records()``
    converts back to per-epoch :class:`EpochRecord` objects.
    """

    channels: dict[str, np.ndarray]
    labels: np.ndarray
    epoch_index: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.epoch_index = np.asarray(self.epoch_index, dtype=np.int64)
        n = len(self.labels)
        for name, arr in self.channels.items():
            if arr.ndim != 3 or arr.shape[0] != n:
                raise ShapeError(f"channel {name!r} has shape {arr.shape}, expected ({n}, T, F)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def channel_names(self) -> list[str]:
        return list(self.channels)

    def subset(self, idx) -> "EpochSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EpochSet({k: v[idx] for k, v in self.channels.items()}, self.labels[idx], self.epoch_index[idx])

    def select_channels(self, names: Sequence[str]) -> "EpochSet":
        missing = [n for n in names if n not in self.channels]
        if missing:
            raise ConfigError(f"unknown channel(s) {missing}; available {self.channel_names}")
        return EpochSet({n: self.channels[n] for n in names}, self.labels, self.epoch_index)

    def records(self) -> list[EpochRecord]:
        return [
            EpochRecord({k: v[i] for k, v in self.channels.items()}, STAGES[self.labels[i]], int(self.epoch_index[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_records(cls, records: Sequence[EpochRecord]) -> "EpochSet":
        if not records:
            raise InputError("no epochs")
        names = list(records[0].channels)
        chans = {n: np.stack([r.channels[n] for r in records]).astype(np.float64) for n in names}
        return cls(chans, [STAGE_INDEX[r.label] for r in records], [r.epoch_index for r in records])

    def stage_histogram(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=len(STAGES))
        return {s: int(c) for s, c in zip(STAGES, counts)}


# ---------------------------------------------------------------------------
# detrending


def detrend_polyfit(y, order: int = 1) -> tuple[np.ndarray, PolyFit]:
    """Subtract the least-squares polynomial of ``order`` fitted on x = 0..N-1.

    The normal equations are assembled from power sums and solved with a
    partially pivoted LU solve. Abscissae are rescaled to [0, 1] first, which
    is a diagonal change of basis on the same system, and the coefficients
    are mapped back to the raw index basis.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if order < 0:
        raise ConfigError(f"polynomial order must be >= 0, got {order}")
    if n <= order:
        raise InputError(f"{n} samples cannot determine an order-{order} polynomial")
    span = float(n - 1) if n > 1 else 1.0
    x = np.arange(n, dtype=np.float64) / span
    powers = x[None, :] ** np.arange(2 * order + 1)[:, None]
    sums = powers.sum(axis=1)
    normal = np.array([[sums[r + c] for c in range(order + 1)] for r in range(order + 1)])
    rhs = powers[: order + 1] @ y
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"normal matrix is singular for order {order} on {n} samples (condition ~{cond:.3g})")
    w_scaled = np.linalg.solve(normal, rhs)
    trend = powers[: order + 1].T @ w_scaled
    coefficients = w_scaled / span ** np.arange(order + 1)
    return y - trend, PolyFit(order, coefficients)


# ---------------------------------------------------------------------------
# spectrogram


def stft_frame_count(n_samples: int, window: int, hop: int) -> int:
    return (n_samples - window) // hop + 1


def stft_logpower(
    signal,
    sample_rate_hz: float,
    fft_size: int = 256,
    window_seconds: float = 2.0,
    overlap: float = 0.5,
) -> np.ndarray:
    """Log-power spectrogram (T, fft_size // 2) using a Hamming window.

    Frames are zero-padded to ``fft_size``; the DC bin is dropped so the
    columns are FFT bins 1..fft_size/2.
    """
    x = np.asarray(signal, dtype=np.float64)
    window = int(round(window_seconds * sample_rate_hz))
    if window < 1 or window > fft_size:
        raise ConfigError(f"window of {window} samples must be between 1 and fft_size={fft_size}")
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must lie in [0, 1), got {overlap}")
    hop = max(1, int(round(window * (1.0 - overlap))))
    if x.size < window:
        raise InputError(f"signal of {x.size} samples is shorter than one {window}-sample window")
    n_frames = stft_frame_count(x.size, window, hop)
    starts = np.arange(n_frames) * hop
    frames = x[starts[:, None] + np.arange(window)[None, :]] * np.hamming(window)
    spectrum = np.fft.rfft(frames, n=fft_size, axis=1)[:, 1 : fft_size // 2 + 1]
    power = spectrum.real**2 + spectrum.imag**2
    return np.log(power + LOG_FLOOR)


def stft_bins(fft_size: int = 256) -> np.ndarray:
    """FFT bin number of each spectrogram column."""
    return np.arange(1, fft_size // 2 + 1)


# ---------------------------------------------------------------------------
# normalisation


def normalize_standardize(A) -> tuple[np.ndarray, NormalizationParams]:
    """Min-max scale to [0, 1] over all elements, then z-score the result.

    A constant matrix carries no information and maps to zeros with
    ``sigma`` recorded as 0.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0:
        raise InputError("cannot normalise an empty matrix")
    lo, hi = float(A.min()), float(A.max())
    if hi == lo:
        return np.zeros_like(A), NormalizationParams(lo, hi, 0.0, 0.0)
    scaled = (A - lo) / (hi - lo)
    mu = float(scaled.mean())
    sigma = float(scaled.std())
    if sigma == 0.0:
        return np.zeros_like(A), NormalizationParams(lo, hi, mu, 0.0)
    return (scaled - mu) / sigma, NormalizationParams(lo, hi, mu, sigma)


# ---------------------------------------------------------------------------
# labels


@dataclass
class Relabeled:
    stages: list[str | None]
    keep: np.ndarray

    @property
    def kept_stages(self) -> list[str]:
        return [s for s, k in zip(self.stages, self.keep) if k]


def relabel_epochs(raw: Sequence[str], wake_margin: int = 60) -> Relabeled:
    """Map raw scoring labels onto the five AASM stages and build a keep mask.

    Movement and unknown epochs are dropped, S3/S4 merge into N3, and wake is
    trimmed to ``wake_margin`` epochs before the first and after the last
    sleep epoch. A recording with no sleep epochs keeps all its wake epochs.
    """
    stages: list[str | None] = []
    for i, lab in enumerate(raw):
        key = str(lab).strip().upper()
        if key.startswith("SLEEP STAGE "):
            key = key[len("SLEEP STAGE ") :]
            if key in ("1", "2", "3", "4"):
                key = "S" + key
        if key == "MOVEMENT TIME":
            key = "MOVEMENT"
        if key == "?":
            key = "UNKNOWN"
        if key not in _RAW_STAGE_MAP:
            raise ValidationError(f"epoch {i}: unknown stage label {lab!r}")
        stages.append(_RAW_STAGE_MAP[key])
    keep = np.array([s is not None for s in stages], dtype=bool)
    sleep = [i for i, s in enumerate(stages) if s not in (None, "W")]
    if sleep:
        lo = sleep[0] - wake_margin
        hi = sleep[-1] + wake_margin
        idx = np.arange(len(stages))
        keep &= (idx >= lo) & (idx <= hi)
    return Relabeled(stages, keep)


# ---------------------------------------------------------------------------
# wearable alignment


@dataclass
class WearableStreams:
    """Raw wrist-device streams on a common clock (seconds).

    ``labels`` holds ``(window_start, stage)`` pairs, one per 30 s window.
    """

    respiration_t: np.ndarray
    respiration: np.ndarray
    heart_rate_t: np.ndarray
    heart_rate: np.ndarray
    steps: list[tuple[float, float]] = field(default_factory=list)
    labels: list[tuple[float, str]] = field(default_factory=list)


@dataclass
class AlignmentReport:
    retained: int = 0
    excluded: list[int] = field(default_factory=list)
    interpolated_slots: int = 0

    @property
    def excluded_count(self) -> int:
        return len(self.excluded)


def _slot_values(t, v, start: float, period: float, n_slots: int) -> np.ndarray:
    """Snap samples to the nearest slot of a regular grid; NaN where empty."""
    out = np.full(n_slots, np.nan)
    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    slot = np.rint((t - start) / period).astype(np.int64)
    ok = (slot >= 0) & (slot < n_slots) & np.isfinite(v)
    # later samples overwrite earlier ones snapping to the same slot
    out[slot[ok]] = v[ok]
    return out


def fill_gaps(values: np.ndarray) -> np.ndarray:
    """Linear interpolation inside, nearest-value extension at the edges."""
    values = np.asarray(values, dtype=np.float64)
    good = np.isfinite(values)
    if good.all():
        return values.copy()
    if not good.any():
        raise InputError("no valid samples to interpolate from")
    idx = np.arange(values.size)
    return np.interp(idx, idx[good], values[good])


def align_wearable(streams: WearableStreams, rows: int = 30) -> tuple[list[EpochRecord], AlignmentReport]:
    """Cut wearable streams into per-label 30 s epochs of 1500 aligned slots.

    Every respiration slot (0.02 s grid) is paired with the heart-rate value
    of the 5 s interval containing it and with the step count recorded at
    that slot (0 when nothing was recorded). Each channel's 1500 slots are
    laid out as a ``(rows, 1500 // rows)`` matrix, one row per time step.
    """
    if RESP_SLOTS % rows:
        raise ConfigError(f"rows={rows} must divide {RESP_SLOTS}")
    report = AlignmentReport()
    records: list[EpochRecord] = []
    step_t = np.array([s[0] for s in streams.steps], dtype=np.float64)
    step_v = np.array([s[1] for s in streams.steps], dtype=np.float64)
    for n, (start, stage) in enumerate(streams.labels):
        resp = _slot_values(streams.respiration_t, streams.respiration, start, RESP_PERIOD, RESP_SLOTS)
        hr = _slot_values(streams.heart_rate_t, streams.heart_rate, start, HR_PERIOD, HR_SLOTS)
        if not np.isfinite(resp).any() or not np.isfinite(hr).any():
            report.excluded.append(n)
            continue
        report.interpolated_slots += int((~np.isfinite(resp)).sum() + (~np.isfinite(hr)).sum())
        resp = fill_gaps(resp)
        hr = np.repeat(fill_gaps(hr), RESP_SLOTS // HR_SLOTS)
        steps = np.zeros(RESP_SLOTS)
        if step_t.size:
            slot = np.rint((step_t - start) / RESP_PERIOD).astype(np.int64)
            inside = (slot >= 0) & (slot < RESP_SLOTS)
            np.add.at(steps, slot[inside], step_v[inside])
        cols = RESP_SLOTS // rows
        records.append(
            EpochRecord(
                {
                    "respiration": resp.reshape(rows, cols),
                    "heart_rate": hr.reshape(rows, cols),
                    "steps": steps.reshape(rows, cols),
                },
                stage,
                n,
            )
        )
        report.retained += 1
    return records, report


# ---------------------------------------------------------------------------
# feature projection


def project_features(x, weights) -> nx.Tensor:
    """Map (..., T, F) features to (..., T, P) with time-shared weights (F, P)."""
    x, weights = nx.as_tensor(x), nx.as_tensor(weights)
    if weights.data.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"project_features: features {x.shape} vs weights {weights.shape}")
    return nx.matmul(x, weights)


# ---------------------------------------------------------------------------
# full chains


def psg_epoch_features(
    samples,
    sample_rate_hz: float,
    detrend_order: int = 1,
    fft_size: int = 256,
    window_seconds: float = 2.0,
    overlap: float = 0.5,
) -> np.ndarray:
    """Detrend -> log-power STFT -> normalise, for one EEG/EOG epoch."""
    residual, _ = detrend_polyfit(samples, detrend_order)
    spec = stft_logpower(residual, sample_rate_hz, fft_size, window_seconds, overlap)
    return normalize_standardize(spec)[0]


def epoch_sample_count(sample_rate_hz: float) -> int:
    return int(math.floor(EPOCH_SECONDS * sample_rate_hz + 1e-9))


def split_epochs(signal: RawChannelSignal, epoch_indices: Sequence[int]) -> dict[int, np.ndarray]:
    """Slice a continuous channel into the requested 30 s epochs.

    Epoch ``k`` covers ``[30k, 30k + 30)`` seconds of the recording clock;
    epochs not fully covered by the signal are omitted.
    """
    per = epoch_sample_count(signal.sample_rate_hz)
    out = {}
    for k in epoch_indices:
        first = int(round((k * EPOCH_SECONDS - signal.start_time) * signal.sample_rate_hz))
        if first < 0 or first + per > len(signal.samples):
            continue
        out[k] = np.asarray(signal.samples[first : first + per], dtype=np.float64)
    return out


def normalize_channels(record: EpochRecord) -> EpochRecord:
    return EpochRecord(
        {k: normalize_standardize(v)[0] for k, v in record.channels.items()}, record.label, record.epoch_index
    )


def stage_histogram(labels: Mapping | Sequence[str]) -> dict[str, int]:
    hist = {s: 0 for s in STAGES}
    for s in labels:
        hist[s] += 1
    return hist
