"""Synthetic multichannel sleep data with planted per-stage signatures.

Spectrogram channels carry a stage-specific band of raised frequency bins;
timeseries channels carry a stage-specific mean and spread. Channels with
informativeness 0 are pure noise, which makes gate behaviour testable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .numerics import named_rng
from .preprocess import STAGES, EpochSet

KINDS = ("spectrogram", "timeseries")


@dataclass(frozen=True)
class ChannelSignature:
    name: str
    kind: str = "spectrogram"
    time_steps: int = 29
    features: int = 128
    informativeness: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"channel {self.name!r}: kind must be one of {KINDS}")
        if self.time_steps < 1 or self.features < 1:
            raise ConfigError(f"channel {self.name!r}: time_steps and features must be >= 1")
        if self.kind == "spectrogram" and self.features < len(STAGES):
            raise ConfigError(f"channel {self.name!r}: need at least {len(STAGES)} frequency bins")
        if not 0.0 <= self.informativeness <= 1.0:
            raise ConfigError(f"channel {self.name!r}: informativeness must lie in [0, 1]")


def _default_channels() -> tuple[ChannelSignature, ...]:
    return (ChannelSignature("eeg"), ChannelSignature("eog"))


@dataclass(frozen=True)
class SynthSpec:
    n_epochs: int = 1000
    channels: tuple[ChannelSignature, ...] = field(default_factory=_default_channels)
    proportions: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    separation: float = 1.0
    noise: float = 1.0
    require_separation: bool = False

    def __post_init__(self):
        chans = tuple(c if isinstance(c, ChannelSignature) else ChannelSignature(**c) for c in self.channels)
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "proportions", tuple(float(p) for p in self.proportions))
        if len(chans) < 2:
            raise ConfigError("synthetic data needs at least 2 channels")
        if len({c.name for c in chans}) != len(chans):
            raise ConfigError("channel names must be unique")
        if len(self.proportions) != len(STAGES) or any(p < 0 for p in self.proportions) or sum(self.proportions) <= 0:
            raise ConfigError(f"proportions must be {len(STAGES)} non-negative weights with a positive sum")
        if self.n_epochs < 1:
            raise ConfigError("n_epochs must be >= 1")
        if self.noise < 0 or self.separation < 0:
            raise ConfigError("noise and separation must be non-negative")
        if self.require_separation and self.separation <= self.noise:
            raise ConfigError(f"separation {self.separation} does not exceed noise floor {self.noise}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        data = dict(data)
        if "channels" in data:
            sig_keys = {f.name for f in fields(ChannelSignature)}
            for c in data["channels"]:
                bad = set(c) - sig_keys
                if bad:
                    raise ConfigError(f"unknown channel signature keys: {sorted(bad)}")
            data["channels"] = tuple(ChannelSignature(**c) for c in data["channels"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = [asdict(c) for c in self.channels]
        d["proportions"] = list(self.proportions)
        return d


def stage_counts(n: int, proportions: Sequence[float]) -> np.ndarray:
    """Largest-remainder apportionment of ``n`` epochs; ties go to earlier stages."""
    p = np.asarray(proportions, dtype=np.float64)
    quota = n * p / p.sum()
    counts = np.floor(quota).astype(np.int64)
    rem = quota - counts
    order = sorted(range(len(p)), key=lambda k: (-rem[k], k))
    for k in order[: n - int(counts.sum())]:
        counts[k] += 1
    return counts


def band_edges(features: int, k: int, n_stages: int = len(STAGES)) -> tuple[int, int]:
    """Frequency-bin range ``[lo, hi)`` reserved for stage ``k``."""
    edges = np.linspace(0, features, n_stages + 1).round().astype(int)
    return int(edges[k]), int(edges[k + 1])


def _channel_data(sig: ChannelSignature, labels: np.ndarray, spec: SynthSpec, rng) -> np.ndarray:
    n, t, f = len(labels), sig.time_steps, sig.features
    amp = spec.separation * sig.informativeness
    out = spec.noise * rng.standard_normal((n, t, f))
    if sig.kind == "spectrogram":
        for k in range(len(STAGES)):
            lo, hi = band_edges(f, k)
            out[labels == k, :, lo:hi] += amp
    else:
        centre = (len(STAGES) - 1) / 2
        level = amp * (np.arange(len(STAGES)) - centre)
        spread = 1.0 + 0.25 * sig.informativeness * np.arange(len(STAGES))
        out *= spread[labels][:, None, None]
        out += level[labels][:, None, None]
    return out


def generate(spec: SynthSpec, seed: int) -> EpochSet:
    """Draw a labelled dataset; stage counts follow ``spec.proportions`` exactly."""
    rng = named_rng(seed, "synth")
    counts = stage_counts(spec.n_epochs, spec.proportions)
    labels = rng.permutation(np.repeat(np.arange(len(STAGES)), counts))
    chans = {sig.name: _channel_data(sig, labels, spec, rng) for sig in spec.channels}
    return EpochSet(chans, labels, np.arange(spec.n_epochs))
