"""Full embedding networks: frame stack, pooling head, segment layers, classifier.

Also holds the binary checkpoint format::

    b"GNSV" | u32 version | u32 len | spec JSON | u32 seed | u32 count
    | count * (u16 len | name | u8 ndim | ndim * u32 dims | float64 LE data)
    | sha256 of everything before it (32 bytes)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .layers import (BatchNormParams, GcnnParams, TdnnParams, receptive_field,
                     run_frame_stack, uniform_init, zeros_param)
from .pooling import (POOLING_KINDS, AttentiveParams, GatedAttentionParams,
                      PooledStats, attention_only_pool, attentive_pool,
                      gate_only_pool, gated_attention_pool, statistics_pool)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"GNSV"
CHECKPOINT_VERSION = 1
EMBEDDING_TAPS = ("affine", "bn")


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class NetworkSpec:
    frame_layer_kind: str = "gcnn"
    layer_widths: tuple[int, ...] = (256, 256, 256, 256, 1500)
    kernel_widths: tuple[int, ...] = (5, 3, 3, 1, 1)
    dilations: tuple[int, ...] = (1, 2, 4, 1, 1)
    pooling: str = "stats"
    attention_dim: int = 256
    segment_widths: tuple[int, int] = (512, 512)
    num_speakers: int = 2
    feat_dim: int = 39
    dropout: float = 0.0
    weight_decay: float = 1e-4
    embedding_tap: str = "affine"
    input_cmvn: bool = False  # per-utterance mean/variance normalisation before the network

    def __post_init__(self):
        for name in ("layer_widths", "kernel_widths", "dilations", "segment_widths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))

    def validate(self) -> "NetworkSpec":
        if self.frame_layer_kind not in ("tdnn", "gcnn"):
            raise SpecError(f"frame_layer_kind must be tdnn or gcnn, got {self.frame_layer_kind!r}")
        n = len(self.layer_widths)
        if n < 1 or len(self.kernel_widths) != n or len(self.dilations) != n:
            raise SpecError(
                f"layer_widths, kernel_widths and dilations must have equal nonzero length, got "
                f"{len(self.layer_widths)}, {len(self.kernel_widths)}, {len(self.dilations)}")
        if any(v < 1 for v in self.layer_widths + self.kernel_widths + self.dilations + self.segment_widths):
            raise SpecError("all widths, kernel sizes and dilations must be positive")
        if len(self.segment_widths) != 2:
            raise SpecError(f"two segment layers expected, got {self.segment_widths}")
        if self.pooling not in POOLING_KINDS:
            raise SpecError(f"pooling must be one of {', '.join(POOLING_KINDS)}, got {self.pooling!r}")
        if self.pooling == "attentive" and self.attention_dim < 1:
            raise SpecError("attention_dim must be positive")
        if self.pooling in ("gated", "gate_only", "attention_only") and n < 2:
            raise SpecError("gated pooling heads need at least two frame-level layers")
        if self.num_speakers < 2:
            raise SpecError("num_speakers must be at least 2")
        if self.feat_dim < 1:
            raise SpecError("feat_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError("dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise SpecError("weight_decay must be nonnegative")
        if self.embedding_tap not in EMBEDDING_TAPS:
            raise SpecError(f"embedding_tap must be one of {EMBEDDING_TAPS}")
        return self

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.kernel_widths, self.dilations)

    @property
    def embedding_dim(self) -> int:
        return self.segment_widths[0]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        try:
            fields = json.loads(text)
            return cls(**fields)
        except (ValueError, TypeError) as exc:
            raise SpecError(f"unreadable network description: {exc}") from None


# (frame layer kind, pooling head) per named system
SYSTEMS = {
    "x_tdnn": ("tdnn", "stats"),
    "x_gcnn": ("gcnn", "stats"),
    "x_tdnn_att": ("tdnn", "attentive"),
    "x_gcnn_att": ("gcnn", "attentive"),
    "x_gcnn_gatt": ("gcnn", "gated"),
    "x_gcnn_gonly": ("gcnn", "gate_only"),
    "x_gcnn_aonly": ("gcnn", "attention_only"),
}


def system_spec(name: str, **overrides) -> NetworkSpec:
    """Reference configuration of a named system, with optional overrides."""
    try:
        kind, pooling = SYSTEMS[name]
    except KeyError:
        raise SpecError(f"unknown system {name!r}; choose from {', '.join(SYSTEMS)}") from None
    widths = (512, 512, 512, 512, 1500) if kind == "tdnn" else (256, 256, 256, 256, 1500)
    base = dict(frame_layer_kind=kind, pooling=pooling, layer_widths=widths)
    base.update(overrides)
    return NetworkSpec(**base).validate()


@dataclass
class AffineParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng, din: int, dout: int) -> "AffineParams":
        return cls(uniform_init(rng, (din, dout), din), zeros_param(dout))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def tensors(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class Model:
    spec: NetworkSpec
    seed: int
    frame_layers: list
    pooling: AttentiveParams | GatedAttentionParams | None
    l6: AffineParams
    bn6: BatchNormParams
    l7: AffineParams
    bn7: BatchNormParams
    output: AffineParams
    rng: np.random.Generator = field(repr=False, default=None)

    def __post_init__(self):
        if self.rng is None:
            # dropout stream, separate from initialisation
            self.rng = np.random.default_rng([self.seed, 1])

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.frame_layers, start=1):
            yield from layer.tensors(f"frame{i}")
        if self.pooling is not None:
            yield from self.pooling.tensors("pool")
        yield from self.l6.tensors("l6")
        yield from self.bn6.tensors("bn6")
        yield from self.l7.tensors("l7")
        yield from self.bn7.tensors("bn7")
        yield from self.output.tensors("output")

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.frame_layers, start=1):
            yield from layer.buffers(f"frame{i}")
        yield from self.bn6.buffers("bn6")
        yield from self.bn7.buffers("bn7")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = set(own) ^ set(state)
        if missing:
            raise CheckpointError(f"parameter names differ: {sorted(missing)[:5]}")
        for name, arr in own.items():
            if arr.shape != state[name].shape:
                raise CheckpointError(f"{name}: shape {state[name].shape}, expected {arr.shape}")
            arr[...] = state[name]


def build_network(spec: NetworkSpec, seed: int = 0) -> Model:
    spec.validate()
    rng = np.random.default_rng(seed)
    layers = []
    din = spec.feat_dim
    last = len(spec.layer_widths) - 1
    for i, (dout, w, d) in enumerate(zip(spec.layer_widths, spec.kernel_widths, spec.dilations)):
        # with GCNN frame layers the last frame-level layer stays a TDNN layer
        if spec.frame_layer_kind == "gcnn" and i < last:
            layers.append(GcnnParams.create(rng, din, dout, w, d))
        else:
            layers.append(TdnnParams.create(rng, din, dout, w, d))
        din = dout
    d_last = spec.layer_widths[-1]
    if spec.pooling == "attentive":
        pooling = AttentiveParams.create(rng, d_last, spec.attention_dim)
    elif spec.pooling == "stats":
        pooling = None
    else:
        pooling = GatedAttentionParams.create(rng, spec.layer_widths[-2], d_last,
                                              spec.kernel_widths[-1], spec.dilations[-1])
    s6, s7 = spec.segment_widths
    return Model(
        spec, seed, layers, pooling,
        AffineParams.create(rng, 2 * d_last, s6), BatchNormParams.create(s6),
        AffineParams.create(rng, s6, s7), BatchNormParams.create(s7),
        AffineParams.create(rng, s7, spec.num_speakers),
    )


def pool(model: Model, stack) -> PooledStats:
    kind = model.spec.pooling
    if kind == "stats":
        return statistics_pool(stack.h)
    if kind == "attentive":
        return attentive_pool(stack.h, model.pooling)[0]
    if kind == "gated":
        return gated_attention_pool(stack.last_input, stack.h, model.pooling)[0]
    if kind == "gate_only":
        return gate_only_pool(stack.last_input, stack.h, model.pooling)
    return attention_only_pool(stack.last_input, stack.h, model.pooling)


def forward_all(model: Model, features: Tensor, train: bool) -> dict[str, Tensor]:
    """Forward pass returning every segment-level intermediate by name."""
    if features.shape[-1] != model.spec.feat_dim:
        raise T.DimensionError(f"features have dim {features.shape[-1]}, model expects {model.spec.feat_dim}")
    stack = run_frame_stack(features, model.frame_layers, train)
    pooled = pool(model, stack).concatenated
    # a lone utterance still needs a batch axis for segment-level batch norm
    x = pooled if pooled.ndim == 2 else T.reshape(pooled, (1, pooled.shape[-1]))
    out = {"frames": stack.h, "pooled": pooled}
    a6 = model.l6(x)
    h6 = T.dropout(model.bn6(T.relu(a6), train), model.spec.dropout, model.rng, train)
    a7 = model.l7(h6)
    h7 = T.dropout(model.bn7(T.relu(a7), train), model.spec.dropout, model.rng, train)
    logits = model.output(h7)
    if pooled.ndim == 1:
        a6, h6, logits = (T.reshape(t, (t.shape[-1],)) for t in (a6, h6, logits))
    out.update(a6=a6, h6=h6, a7=a7, h7=h7, logits=logits)
    return out


def forward(model: Model, features: Tensor, train: bool = False) -> Tensor:
    """Speaker logits for one utterance ``(T, F)`` or a batch ``(N, T, F)``."""
    return forward_all(model, features, train)["logits"]


def extract_embedding(model: Model, features) -> np.ndarray:
    """Embedding from the first segment layer, in eval mode without tracking."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    with T.no_grad():
        out = forward_all(model, feats, train=False)
    key = "a6" if model.spec.embedding_tap == "affine" else "h6"
    return out[key].data.copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(model: Model) -> bytes:
    spec = model.spec.to_json().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(spec)), spec]
    state = model.state_arrays()
    parts.append(struct.pack("<II", model.seed & 0xFFFFFFFF, len(state)))
    for name, arr in state.items():
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + hashlib.sha256(payload).digest()


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 4 + 8 + 32:
        raise CheckpointError(f"{path}: checkpoint is truncated")
    payload, digest = buf[:-32], buf[-32:]
    r = _Reader(payload)
    r.take(4)
    version, spec_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated file)")
    spec = NetworkSpec.from_json(r.take(spec_len).decode())
    seed, count = r.unpack("<II")
    state = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape))
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    model = build_network(spec, seed)
    model.load_state_arrays(state)
    return model
