"""Frame-level layers: dilated TDNN layers and gated convolutional (GCNN) units."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    a = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, dim: int) -> "BatchNormParams":
        return cls(Tensor(np.ones(dim), requires_grad=True), zeros_param(dim),
                   np.zeros(dim), np.ones(dim))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, train)

    def tensors(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


@dataclass
class TdnnParams:
    kernel: Tensor  # (W, Din, Dout)
    bias: Tensor
    bn: BatchNormParams
    dilation: int

    @property
    def width(self) -> int:
        return self.kernel.shape[0]

    @property
    def out_dim(self) -> int:
        return self.kernel.shape[2]

    @classmethod
    def create(cls, rng, din: int, dout: int, width: int, dilation: int) -> "TdnnParams":
        return cls(uniform_init(rng, (width, din, dout), width * din), zeros_param(dout),
                   BatchNormParams.create(dout), dilation)

    def tensors(self, prefix: str):
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias
        yield from self.bn.tensors(f"{prefix}.bn")

    def buffers(self, prefix: str):
        yield from self.bn.buffers(f"{prefix}.bn")


@dataclass
class GcnnParams:
    """Weights of one gated convolutional unit.

    ``cell_projection`` maps the previous layer's width onto this layer's
    width and is shared by the hidden-state and memory-cell terms of the cell
    update.  It is ``None`` when the widths already agree.
    """

    w_o: Tensor
    w_f: Tensor
    w_g: Tensor
    b_o: Tensor
    b_f: Tensor
    b_g: Tensor
    cell_projection: Tensor | None
    bn: BatchNormParams
    dilation: int

    def __post_init__(self):
        if not (self.w_o.shape == self.w_f.shape == self.w_g.shape):
            raise DimensionError(
                f"gate kernels differ: {self.w_o.shape}, {self.w_f.shape}, {self.w_g.shape}")
        _, din, dout = self.w_o.shape
        if din != dout and self.cell_projection is None:
            raise DimensionError(f"GCNN {din}->{dout} needs a cell projection")
        if self.cell_projection is not None and self.cell_projection.shape != (din, dout):
            raise DimensionError(
                f"cell projection {self.cell_projection.shape} does not map {din}->{dout}")

    @property
    def width(self) -> int:
        return self.w_o.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w_o.shape[2]

    @classmethod
    def create(cls, rng, din: int, dout: int, width: int, dilation: int) -> "GcnnParams":
        fan = width * din
        proj = uniform_init(rng, (din, dout), din) if din != dout else None
        return cls(
            uniform_init(rng, (width, din, dout), fan),
            uniform_init(rng, (width, din, dout), fan),
            uniform_init(rng, (width, din, dout), fan),
            zeros_param(dout), zeros_param(dout), zeros_param(dout),
            proj, BatchNormParams.create(dout), dilation,
        )

    def tensors(self, prefix: str):
        for name in ("w_o", "w_f", "w_g", "b_o", "b_f", "b_g"):
            yield f"{prefix}.{name}", getattr(self, name)
        if self.cell_projection is not None:
            yield f"{prefix}.cell_projection", self.cell_projection
        yield from self.bn.tensors(f"{prefix}.bn")

    def buffers(self, prefix: str):
        yield from self.bn.buffers(f"{prefix}.bn")


@dataclass
class LayerActivations:
    h: Tensor
    c: Tensor | None = None
    # pre-batch-norm gate values, kept for inspection and tests
    gates: dict = field(default_factory=dict)


def frame_context(h_prev: Tensor, width: int, dilation: int) -> Tensor:
    return T.frame_context(h_prev, width, dilation)


def receptive_field(widths: Sequence[int], dilations: Sequence[int]) -> int:
    return 1 + sum((w - 1) * d for w, d in zip(widths, dilations))


def tdnn_forward(h_prev: Tensor, params: TdnnParams, train: bool) -> Tensor:
    """Dilated convolution, ReLU, then batch normalisation."""
    y = T.conv1d_dilated(h_prev, params.kernel, params.bias, params.dilation)
    return params.bn(T.relu(y), train)


def _center_crop(x: Tensor, width: int, dilation: int) -> Tensor:
    span = (width - 1) * dilation
    if span == 0:
        return x
    return T.crop_frames(x, T.context_offset(width, dilation), x.shape[-2] - span)


def gcnn_cell(h_prev: Tensor, c_prev: Tensor | None, params: GcnnParams) -> LayerActivations:
    """Gated unit without the trailing batch norm.

    ``c_prev=None`` stands for a zero initial memory cell of the output width.
    """
    if c_prev is not None and c_prev.shape != h_prev.shape:
        raise DimensionError(f"h_prev {h_prev.shape} and c_prev {c_prev.shape} differ")
    w, d = params.width, params.dilation
    ctx = T.frame_context(h_prev, w, d)
    din, dout = params.w_o.shape[1], params.w_o.shape[2]
    if ctx.shape[-1] != w * din:
        raise DimensionError(f"GCNN input width {h_prev.shape[-1]} does not match kernel {params.w_o.shape}")

    def gate(kernel, bias):
        return T.add(T.matmul(ctx, T.reshape(kernel, (w * din, dout))), bias)

    o = T.sigmoid(gate(params.w_o, params.b_o))
    f = T.sigmoid(gate(params.w_f, params.b_f))
    g = T.tanh(gate(params.w_g, params.b_g))

    def project(x):
        x = _center_crop(x, w, d)
        return x if params.cell_projection is None else T.matmul(x, params.cell_projection)

    keep_input = T.sub(T.Tensor(1.0), f)
    c_new = T.mul(keep_input, project(h_prev))
    if c_prev is not None:
        c_new = T.add(T.mul(f, project(c_prev)), c_new)
    h_new = T.add(T.mul(o, g), c_new)
    return LayerActivations(h_new, c_new, {"o": o, "f": f, "g": g})


def gcnn_forward(h_prev: Tensor, c_prev: Tensor | None, params: GcnnParams, train: bool) -> LayerActivations:
    act = gcnn_cell(h_prev, c_prev, params)
    act.h = params.bn(act.h, train)
    return act


@dataclass
class FrameStackOutput:
    h: Tensor  # last layer output
    last_input: Tensor  # input to the last layer, used by gated pooling heads
    activations: list[LayerActivations]


def run_frame_stack(features: Tensor, layers: Sequence[TdnnParams | GcnnParams], train: bool) -> FrameStackOutput:
    """Run the frame-level layers in order.

    GCNN layers thread a memory cell; it starts at zero and is dropped once a
    TDNN layer is reached.
    """
    widths = [p.width for p in layers]
    dilations = [p.dilation for p in layers]
    need = receptive_field(widths, dilations)
    if features.shape[-2] < need:
        raise DimensionError(
            f"utterance has {features.shape[-2]} frames; the frame stack needs at least {need}")
    h, c = features, None
    acts = []
    last_input = features
    for p in layers:
        last_input = h
        if isinstance(p, GcnnParams):
            act = gcnn_forward(h, c, p, train)
            c = act.c
        else:
            act = LayerActivations(tdnn_forward(h, p, train))
            c = None
        h = act.h
        acts.append(act)
    return FrameStackOutput(h, last_input, acts)
