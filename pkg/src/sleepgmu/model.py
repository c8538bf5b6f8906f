"""Per-channel transformer encoders, gated multimodal fusion and the
classification head.

Every channel gets its own encoder: a time-shared linear projection, a
learnable CLASS token prepended to the sequence, sinusoidal position
encoding and a stack of pre-norm transformer blocks. The CLASS token output
of each channel is fused across channels (GMU gates, or plain concatenation
for the ablation baseline) and classified by a two-layer MLP.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError, ValidationError
from .numerics import Tensor
from .preprocess import EpochRecord, project_features

CHECKPOINT_MAGIC = b"SGMUCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[str, ...] = ("fpz_cz", "eog")
    input_dims: tuple[int, ...] = (128, 128)
    seq_len: int = 29
    embed_dim: int = 64
    heads: int = 8
    ff_hidden: int = 128
    blocks_per_channel: int = 3
    attn_dropout: float = 0.4
    gmu_shared_dim: int = 64
    classifier_hidden: int = 64
    classifier_dropout: float = 0.5
    num_classes: int = 5
    fusion: str = "gmu"
    sequential_heads: bool = False
    qkv_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "input_dims", tuple(int(f) for f in self.input_dims))
        self.validate()

    def validate(self) -> None:
        if not self.channels:
            raise ConfigError("at least one channel is required")
        if len(set(self.channels)) != len(self.channels):
            raise ConfigError(f"duplicate channel names in {self.channels}")
        if len(self.input_dims) != len(self.channels):
            raise ConfigError(f"{len(self.channels)} channels but {len(self.input_dims)} input dims")
        for name in ("seq_len", "embed_dim", "heads", "ff_hidden", "blocks_per_channel",
                     "gmu_shared_dim", "classifier_hidden", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even for sin/cos position encoding, got {self.embed_dim}")
        for name in ("attn_dropout", "classifier_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.fusion not in ("gmu", "concat"):
            raise ConfigError(f"fusion must be 'gmu' or 'concat', got {self.fusion!r}")
        if self.fusion == "gmu" and len(self.channels) < 2:
            raise ConfigError("GMU fusion needs at least two channels")
        if self.qkv_activation not in ("identity", "tanh"):
            raise ConfigError(f"qkv_activation must be 'identity' or 'tanh', got {self.qkv_activation!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def fused_dim(self) -> int:
        if self.fusion == "gmu":
            return self.gmu_shared_dim
        return self.embed_dim * len(self.channels)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["input_dims"] = list(self.input_dims)
        return d


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of learned scalars for ``config``."""
    p, ff, c = config.embed_dim, config.ff_hidden, len(config.channels)
    per_block = 4 * p * p + 2 * p * ff + 4 * p
    encoders = sum(f * p + p + config.blocks_per_channel * per_block for f in config.input_dims)
    gmu = c * (config.gmu_shared_dim * p + config.gmu_shared_dim * c * p) if config.fusion == "gmu" else 0
    h, k = config.classifier_hidden, config.num_classes
    return encoders + gmu + config.fused_dim * h + h + h * k + k


# ---------------------------------------------------------------------------
# parameters


@dataclass
class BlockParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ff1: Tensor
    ff2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class ChannelEncoderParams:
    projection: Tensor
    class_token: Tensor
    blocks: list[BlockParams]


@dataclass
class GmuParams:
    hidden: list[Tensor]
    gates: list[Tensor]


@dataclass
class ClassifierParams:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    encoders: dict[str, ChannelEncoderParams]
    gmu: GmuParams | None
    classifier: ClassifierParams

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for ch, enc in self.encoders.items():
            out.append((f"enc.{ch}.projection", enc.projection))
            out.append((f"enc.{ch}.class_token", enc.class_token))
            for k, blk in enumerate(enc.blocks):
                for f in fields(blk):
                    out.append((f"enc.{ch}.block{k}.{f.name}", getattr(blk, f.name)))
        if self.gmu is not None:
            for ch, w in zip(self.encoders, self.gmu.hidden):
                out.append((f"gmu.hidden.{ch}", w))
            for ch, w in zip(self.encoders, self.gmu.gates):
                out.append((f"gmu.gate.{ch}", w))
        for f in fields(self.classifier):
            out.append((f"clf.{f.name}", getattr(self.classifier, f.name)))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def count(self) -> int:
        return sum(t.size for t in self.parameters())

    def copy(self) -> "ModelParams":
        clone = init_params(self.config, np.random.default_rng(0))
        for (_, dst), (_, src) in zip(clone.named_parameters(), self.named_parameters()):
            dst.data[...] = src.data
        return clone


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _const(value: float, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(+-sqrt(1/fan_in)) weights, zero CLASS tokens and biases."""
    p, ff = config.embed_dim, config.ff_hidden
    encoders = {}
    for ch, f in zip(config.channels, config.input_dims):
        blocks = []
        for k in range(config.blocks_per_channel):
            tag = f"enc.{ch}.block{k}"
            blocks.append(
                BlockParams(
                    wq=_uniform(rng, (p, p), p, f"{tag}.wq"),
                    wk=_uniform(rng, (p, p), p, f"{tag}.wk"),
                    wv=_uniform(rng, (p, p), p, f"{tag}.wv"),
                    wo=_uniform(rng, (p, p), p, f"{tag}.wo"),
                    ln1_gain=_const(1.0, p, f"{tag}.ln1_gain"),
                    ln1_bias=_const(0.0, p, f"{tag}.ln1_bias"),
                    ff1=_uniform(rng, (p, ff), p, f"{tag}.ff1"),
                    ff2=_uniform(rng, (ff, p), ff, f"{tag}.ff2"),
                    ln2_gain=_const(1.0, p, f"{tag}.ln2_gain"),
                    ln2_bias=_const(0.0, p, f"{tag}.ln2_bias"),
                )
            )
        encoders[ch] = ChannelEncoderParams(
            projection=_uniform(rng, (f, p), f, f"enc.{ch}.projection"),
            class_token=_const(0.0, p, f"enc.{ch}.class_token"),
            blocks=blocks,
        )
    gmu = None
    if config.fusion == "gmu":
        s, c = config.gmu_shared_dim, len(config.channels)
        gmu = GmuParams(
            hidden=[_uniform(rng, (s, p), p, f"gmu.hidden.{ch}") for ch in config.channels],
            gates=[_uniform(rng, (s, c * p), c * p, f"gmu.gate.{ch}") for ch in config.channels],
        )
    h, k = config.classifier_hidden, config.num_classes
    classifier = ClassifierParams(
        fc1_w=_uniform(rng, (config.fused_dim, h), config.fused_dim, "clf.fc1_w"),
        fc1_b=_const(0.0, h, "clf.fc1_b"),
        fc2_w=_uniform(rng, (h, k), h, "clf.fc2_w"),
        fc2_b=_const(0.0, k, "clf.fc2_b"),
    )
    return ModelParams(config, encoders, gmu, classifier)


# ---------------------------------------------------------------------------
# encoder


def positional_encoding(seq_len: int, dim: int) -> np.ndarray:
    """Sinusoidal table: sin at even columns, cos at odd, 10000^(2i/dim) wavelengths."""
    if dim % 2:
        raise ConfigError(f"position encoding needs an even dimension, got {dim}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    denom = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((seq_len, dim))
    pe[:, 0::2] = np.sin(pos / denom)
    pe[:, 1::2] = np.cos(pos / denom)
    return pe


def _activation(x: Tensor, kind: str) -> Tensor:
    return nx.tanh(x) if kind == "tanh" else x


def multi_head_attention(
    tokens,
    params: BlockParams,
    heads: int,
    activation: str = "identity",
    sequential: bool = False,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over (..., S, P) tokens.

    In the default parallel mode Q, K and V are split into ``heads`` slices
    of width P/heads whose outputs are concatenated. With ``sequential=True``
    head i scores with its own Q/K column slice and re-weights the full-width
    values of head i-1's output, so the heads form a chain. Either way the
    result goes through the output projection ``wo``.
    """
    x = nx.as_tensor(tokens)
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"attention expects (S, P) or (B, S, P) tokens, got {x.shape}")
    squeeze = x.data.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    b, s, p = x.shape
    if params.wq.shape != (p, p):
        raise ShapeError(f"attention weights {params.wq.shape} do not match token width {p}")
    if p % heads:
        raise ConfigError(f"token width {p} is not divisible by {heads} heads")
    d = p // heads
    inv = 1.0 / math.sqrt(d)
    weights = []
    if sequential:
        f = x
        for i in range(heads):
            cols = (slice(None), slice(i * d, (i + 1) * d))
            q = _activation(nx.matmul(f, params.wq[cols]), activation)
            k = _activation(nx.matmul(f, params.wk[cols]), activation)
            v = _activation(nx.matmul(f, params.wv), activation)
            attn = nx.softmax(nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), inv))
            weights.append(attn.data)
            f = nx.matmul(attn, v)
        ctx = f
        weights = np.stack(weights, axis=1)
    else:
        def split(t):
            return nx.transpose(nx.reshape(t, (b, s, heads, d)), (0, 2, 1, 3))

        q = split(_activation(nx.matmul(x, params.wq), activation))
        k = split(_activation(nx.matmul(x, params.wk), activation))
        v = split(_activation(nx.matmul(x, params.wv), activation))
        attn = nx.softmax(nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), inv))
        weights = attn.data
        ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (b, s, p))
    out = nx.matmul(ctx, params.wo)
    if squeeze:
        out = nx.reshape(out, (s, p))
        weights = weights[0]
    return (out, weights) if return_weights else out


def transformer_block(
    tokens,
    params: BlockParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm residual block: x + Attn(LN(x)), then + FF(LN(x))."""
    x = nx.as_tensor(tokens)
    h = nx.layer_norm(x, params.ln1_gain, params.ln1_bias)
    a = multi_head_attention(h, params, config.heads, config.qkv_activation, config.sequential_heads)
    x = nx.add(x, nx.dropout(a, config.attn_dropout, training, rng))
    h = nx.layer_norm(x, params.ln2_gain, params.ln2_bias)
    f = nx.matmul(nx.relu(nx.matmul(h, params.ff1)), params.ff2)
    return nx.add(x, nx.dropout(f, config.attn_dropout, training, rng))


def encode_channel(
    features,
    encoder: ChannelEncoderParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(B, T, F) or (T, F) features -> (B, P) or (P,) CLASS-token embedding."""
    x = nx.as_tensor(features)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    if x.data.ndim != 3 or x.shape[1] != config.seq_len:
        raise ShapeError(f"expected {config.seq_len} time steps, got features of shape {x.shape}")
    b = x.shape[0]
    p = config.embed_dim
    proj = project_features(x, encoder.projection)
    cls = nx.broadcast_to(encoder.class_token, (b, 1, p))
    tokens = nx.add(nx.concat([cls, proj], axis=1), positional_encoding(config.seq_len + 1, p))
    for blk in encoder.blocks:
        tokens = transformer_block(tokens, blk, config, training, rng)
    out = tokens[:, 0, :]
    return nx.reshape(out, (p,)) if squeeze else out


# ---------------------------------------------------------------------------
# fusion and classification


def gmu_fuse(features: Sequence, params: GmuParams) -> tuple[Tensor, list[np.ndarray]]:
    """Gated multimodal unit.

    h_i = tanh(W_i x_i), z_i = sigmoid(Wz_i [x_1 .. x_C]) and the fused
    vector is sum_i z_i * h_i (elementwise). Returns the fused tensor and the
    gate values z_i for inspection.
    """
    xs = [nx.as_tensor(x) for x in features]
    if len(xs) != len(params.hidden):
        raise ConfigError(f"GMU built for {len(params.hidden)} modalities, got {len(xs)}")
    if len(xs) < 2:
        raise ConfigError("GMU fusion needs at least two modalities")
    widths = {x.shape[-1] for x in xs}
    if len(widths) != 1 or widths.pop() != params.hidden[0].shape[1]:
        raise ShapeError(f"GMU inputs {[x.shape for x in xs]} vs hidden weights {params.hidden[0].shape}")
    joined = nx.concat(xs, axis=-1)
    fused = None
    gates = []
    for x, w_h, w_z in zip(xs, params.hidden, params.gates):
        h = nx.tanh(nx.matmul(_as_matrix(x), nx.transpose(w_h)))
        z = nx.sigmoid(nx.matmul(_as_matrix(joined), nx.transpose(w_z)))
        gates.append(z.data if x.data.ndim == 2 else z.data[0])
        term = nx.mul(z, h)
        fused = term if fused is None else nx.add(fused, term)
    if xs[0].data.ndim == 1:
        fused = nx.reshape(fused, (fused.shape[-1],))
    return fused, gates


def _as_matrix(x: Tensor) -> Tensor:
    return x if x.data.ndim == 2 else nx.reshape(x, (1, x.shape[0]))


def fuse_concat(features: Sequence) -> Tensor:
    """Concatenate channel embeddings in channel order (ablation baseline)."""
    xs = [nx.as_tensor(x) for x in features]
    if not xs:
        raise ConfigError("nothing to concatenate")
    return xs[0] if len(xs) == 1 else nx.concat(xs, axis=-1)


def classifier_logits(
    fused,
    params: ClassifierParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    x = nx.as_tensor(fused)
    if x.shape[-1] != params.fc1_w.shape[0]:
        raise ShapeError(f"classifier expects width {params.fc1_w.shape[0]}, got {x.shape}")
    h = nx.relu(nx.add(nx.matmul(_as_matrix(x), params.fc1_w), params.fc1_b))
    h = nx.dropout(h, config.classifier_dropout, training, rng)
    logits = nx.add(nx.matmul(h, params.fc2_w), params.fc2_b)
    return logits if x.data.ndim == 2 else nx.reshape(logits, (config.num_classes,))


def classify(fused, params: ClassifierParams, config: ModelConfig, training: bool = False, rng=None) -> np.ndarray:
    """fc1 -> ReLU -> dropout -> fc2 -> softmax; returns probabilities."""
    return nx.softmax(classifier_logits(fused, params, config, training, rng)).data


@dataclass
class ForwardResult:
    logits: Tensor
    gates: dict[str, np.ndarray] = field(default_factory=dict)
    channel_features: dict[str, np.ndarray] = field(default_factory=dict)
    fused: np.ndarray | None = None

    @property
    def probs(self) -> np.ndarray:
        return nx.softmax(self.logits.data).data


def forward_batch(
    inputs: Mapping[str, np.ndarray],
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Batched forward pass over ``{channel: (B, T, F)}`` inputs."""
    cfg = params.config
    missing = [ch for ch in cfg.channels if ch not in inputs]
    if missing:
        raise ValidationError(f"inputs lack configured channel(s) {missing}")
    feats = []
    for ch, f in zip(cfg.channels, cfg.input_dims):
        x = inputs[ch]
        if x.shape[-1] != f:
            raise ShapeError(f"channel {ch!r}: expected {f} features per step, got {x.shape}")
        feats.append(encode_channel(x, params.encoders[ch], cfg, training, rng))
    if cfg.fusion == "gmu":
        fused, gate_list = gmu_fuse(feats, params.gmu)
        gates = dict(zip(cfg.channels, gate_list))
    else:
        fused, gates = fuse_concat(feats), {}
    logits = classifier_logits(fused, params.classifier, cfg, training, rng)
    return ForwardResult(
        logits,
        gates,
        {ch: t.data for ch, t in zip(cfg.channels, feats)},
        fused.data,
    )


def model_forward(
    epoch: EpochRecord,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Class probabilities and per-channel gate vectors for one epoch."""
    inputs = {ch: np.asarray(m, dtype=np.float64)[None] for ch, m in epoch.channels.items()}
    res = forward_batch(inputs, params, training, rng)
    return res.probs[0], {ch: g[0] for ch, g in res.gates.items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, seed: int | None = None, step: int = 0, extra: dict | None = None) -> None:
    """JSON header followed by the little-endian f64 parameter payload."""
    named = params.named_parameters()
    header = {
        "config": params.config.to_dict(),
        "parameters": [[name, list(t.shape)] for name, t in named],
        "seed": seed,
        "step": step,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<BI", raw, off)
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<BI")
    header = json.loads(raw[off : off + hlen])
    off += hlen
    params = init_params(ModelConfig.from_dict(header["config"]), np.random.default_rng(0))
    named = params.named_parameters()
    declared = [(n, tuple(s)) for n, s in header["parameters"]]
    if declared != [(n, t.shape) for n, t in named]:
        raise ValidationError(f"{path}: parameter layout does not match its config")
    for _, t in named:
        n = t.size
        t.data[...] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(t.shape)
        off += 8 * n
    if off != len(raw):
        raise ValidationError(f"{path}: {len(raw) - off} trailing bytes")
    return params, header
