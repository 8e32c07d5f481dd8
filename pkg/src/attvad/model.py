"""Stacked-LSTM VAD network with one attention module shared by every layer."""
from __future__ import annotations

import io
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import AttentionKind, init_attention, refine
from .features import N_MELS, NormStats
from .layers import (
    DenseParams,
    LstmParams,
    dense,
    init_dense,
    init_lstm,
    lstm_forward,
    named_buffers,
    named_params,
    value_shape,
)

CHECKPOINT_MAGIC = "ATTVAD-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = N_MELS
    layers: int = 3
    hidden: int = 64
    attention: AttentionKind = AttentionKind.NONE
    t_train: int = 50

    def __post_init__(self):
        object.__setattr__(self, "attention", AttentionKind.parse(self.attention))
        for name in ("input_dim", "layers", "hidden", "t_train"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")


LSTM_64 = ModelConfig(hidden=64)
LSTM_96 = ModelConfig(hidden=96)


@dataclass
class ModelParams:
    config: ModelConfig
    lstm: list[LstmParams]
    attention: object
    head: DenseParams

    _static = ("config",)


@dataclass
class ParamCount:
    total: int
    breakdown: dict = field(default_factory=dict)


def build(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Deterministically initialize a model from ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    n_in = config.input_dim
    for _ in range(config.layers):
        layers.append(init_lstm(rng, n_in, config.hidden))
        n_in = config.hidden
    attention = init_attention(config.attention, rng, sites=config.layers)
    head = init_dense(rng, config.hidden)
    return ModelParams(config, layers, attention, head)


def forward(params: ModelParams, x, mode: str = "train", trace: list | None = None,
            track_stats: bool = True):
    """Per-frame speech probabilities for features ``x`` (``T x I`` or ``B x T x I``).

    Each LSTM layer's hidden map is refined by the shared attention module
    before feeding the next layer; the last refined map goes to the head.
    In ``eval`` mode the frequential branch is applied per ``t_train`` chunk.
    When ``trace`` is a list, ``(H, H')`` value pairs are appended per layer.
    """
    cfg = params.config
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    shape = value_shape(x)
    if len(shape) not in (2, 3) or shape[-1] != cfg.input_dim:
        raise ad.ShapeError("forward", shape, (cfg.input_dim,), detail="feature dim")
    if shape[-2] < 1:
        raise ad.ShapeError("forward", shape, detail="T must be >= 1")
    t_train = cfg.t_train if mode == "eval" else None
    hmap = x
    for site, lp in enumerate(params.lstm):
        raw, _ = lstm_forward(lp, hmap)
        hmap = refine(cfg.attention, raw, params.attention, mode, site, t_train, track_stats)
        if trace is not None:
            trace.append((np.array(ad.value_of(raw)), np.array(ad.value_of(hmap))))
    return ad.sigmoid(dense(params.head, hmap))


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Eval-mode probabilities for one utterance as a flat array of length T."""
    return np.asarray(forward(params, features, "eval")).reshape(-1)


def count_params(params: ModelParams) -> ParamCount:
    """Learnable scalars (batch-norm running statistics excluded)."""
    def count(tree):
        return int(sum(np.prod(value_shape(a)) for _, a in named_params(tree)))

    breakdown = {
        "lstm": count(params.lstm),
        "attention": count(params.attention),
        "head": count(params.head),
    }
    return ParamCount(sum(breakdown.values()), breakdown)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Text header lines (utf-8), terminated by "END":
#   ATTVAD-CHECKPOINT <version>
#   <ModelConfig field>=<value>       one per field
#   norm_mean=<float.hex>,...         optional, 40 values
#   norm_std=<float.hex>,...
#   arrays=<N>
#   END
# then N records, each a header line "<name> <ndim> <d1> ... <dn>\n" followed
# by prod(d) little-endian float64 values.  Names are prefixed "param:" or
# "buffer:".


@dataclass
class Checkpoint:
    params: ModelParams
    norm: NormStats | None = None

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _arrays(params: ModelParams):
    for name, arr in named_params(params):
        yield f"param:{name}", arr
    for name, arr in named_buffers(params):
        yield f"buffer:{name}", arr


def _hex_list(values) -> str:
    return ",".join(float(v).hex() for v in np.asarray(values, dtype=np.float64))


def _parse_hex_list(text: str) -> np.ndarray:
    return np.array([float.fromhex(t) for t in text.split(",") if t], dtype=np.float64)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config
    arrays = list(_arrays(ckpt.params))
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        lines.append(f"{f.name}={val.value if isinstance(val, AttentionKind) else val}")
    if ckpt.norm is not None:
        lines.append(f"norm_mean={_hex_list(ckpt.norm.mean)}")
        lines.append(f"norm_std={_hex_list(ckpt.norm.std)}")
    lines.append(f"arrays={len(arrays)}")
    lines.append("END")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("utf-8"))
    for name, arr in arrays:
        a = np.ascontiguousarray(ad.value_of(arr), dtype="<f8")
        buf.write(f"{name} {a.ndim} {' '.join(str(d) for d in a.shape)}".rstrip().encode() + b"\n")
        buf.write(a.tobytes())
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    stream = io.BytesIO(data)
    first = stream.readline().decode("utf-8", "replace").split()
    if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    if int(first[1]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {first[1]}")
    header = {}
    while True:
        line = stream.readline()
        if not line:
            raise CheckpointError(f"{source}: truncated header")
        text = line.decode("utf-8").rstrip("\n")
        if text == "END":
            break
        key, _, val = text.partition("=")
        header[key] = val

    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{
        k: (header[k] if k == "attention" else int(header[k])) for k in known if k in header
    })
    norm = None
    if "norm_mean" in header:
        norm = NormStats(_parse_hex_list(header["norm_mean"]), _parse_hex_list(header["norm_std"]))

    params = build(cfg, seed=0)
    slots = dict(_arrays(params))
    n = int(header.get("arrays", -1))
    seen = set()
    for _ in range(n):
        parts = stream.readline().decode("utf-8").split()
        if not parts:
            raise CheckpointError(f"{source}: truncated array table")
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(d) for d in parts[2:2 + ndim])
        count = int(np.prod(shape)) if shape else 1
        raw = stream.read(8 * count)
        if len(raw) != 8 * count:
            raise CheckpointError(f"{source}: truncated data for {name}")
        if name not in slots:
            raise CheckpointError(f"{source}: unexpected array {name}")
        target = slots[name]
        if target.shape != shape:
            raise CheckpointError(f"{source}: {name} has shape {shape}, expected {target.shape}")
        target[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        seen.add(name)
    missing = set(slots) - seen
    if missing:
        raise CheckpointError(f"{source}: missing arrays {sorted(missing)}")
    return Checkpoint(params, norm)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return parse_checkpoint(path.read_bytes(), str(path))
