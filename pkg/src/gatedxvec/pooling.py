"""Temporal pooling heads mapping frame sequences to fixed-size statistics.

All heads accept ``(..., T, D)`` inputs and return a :class:`PooledStats`
whose ``concatenated`` field is ``[mean || std]`` of width ``2 * D``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import uniform_init, zeros_param
from .tensor import DimensionError, Tensor

POOLING_KINDS = ("stats", "attentive", "gated", "gate_only", "attention_only")


@dataclass
class PooledStats:
    mean: Tensor
    std: Tensor

    @property
    def concatenated(self) -> Tensor:
        return T.concat([self.mean, self.std], axis=-1)


@dataclass
class AttentiveParams:
    w1: Tensor  # (D, A)
    w2: Tensor  # (A,)

    @classmethod
    def create(cls, rng, dim: int, attention_dim: int) -> "AttentiveParams":
        return cls(uniform_init(rng, (dim, attention_dim), dim),
                   uniform_init(rng, (attention_dim,), attention_dim))

    def tensors(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.w2", self.w2


@dataclass
class GatedAttentionParams:
    w_s: Tensor  # (W, Din, Dout), same window as the last frame-level layer
    b_s: Tensor
    dilation: int = 1

    @classmethod
    def create(cls, rng, din: int, dout: int, width: int = 1, dilation: int = 1) -> "GatedAttentionParams":
        return cls(uniform_init(rng, (width, din, dout), width * din), zeros_param(dout), dilation)

    def tensors(self, prefix: str):
        yield f"{prefix}.w_s", self.w_s
        yield f"{prefix}.b_s", self.b_s


def _check_frames(h: Tensor) -> None:
    if h.ndim < 2 or h.shape[-2] == 0:
        raise DimensionError(f"pooling needs at least one frame, got shape {h.shape}")


def weighted_stats(z: Tensor, alpha: Tensor) -> PooledStats:
    """Weighted mean and std with weights ``alpha`` of shape ``(..., T)``.

    ``sum_t a_t z_t^2 - u^2`` is evaluated as ``sum_t a_t (z_t - u)^2`` (equal
    when the weights sum to one) so constant units give an exact zero rather
    than cancellation noise under the square root.  It is still clamped at 0.
    """
    a = T.expand_dims(alpha, -1)
    u = T.sum(T.mul(a, z), axis=-2)
    centred = T.sub(z, T.expand_dims(u, -2))
    var = T.clamp_min(T.sum(T.mul(a, T.mul(centred, centred)), axis=-2), 0.0)
    return PooledStats(u, T.sqrt(var))


def statistics_pool(h: Tensor) -> PooledStats:
    """Uniform mean and population standard deviation over frames."""
    _check_frames(h)
    u = T.mean(h, axis=-2)
    centred = T.sub(h, T.expand_dims(u, -2))
    var = T.mean(T.mul(centred, centred), axis=-2)
    return PooledStats(u, T.sqrt(var))


def attention_weights(h: Tensor, params: AttentiveParams) -> Tensor:
    scores = T.matmul(T.relu(T.matmul(h, params.w1)), params.w2)
    return T.softmax_over_frames(scores)


def attentive_pool(h: Tensor, params: AttentiveParams) -> tuple[PooledStats, Tensor]:
    _check_frames(h)
    if params.w1.shape[0] != h.shape[-1]:
        raise DimensionError(f"attention projection {params.w1.shape} does not fit frames {h.shape}")
    alpha = attention_weights(h, params)
    return weighted_stats(h, alpha), alpha


def gate_preactivation(ctx: Tensor, params: GatedAttentionParams) -> Tensor:
    """Gate logits for each frame; ``ctx`` is the (uncontexted) input of the last frame layer."""
    return T.conv1d_dilated(ctx, params.w_s, params.b_s, params.dilation)


def _gate_parts(ctx: Tensor, hs: Tensor, params: GatedAttentionParams):
    _check_frames(hs)
    pre = gate_preactivation(ctx, params)
    if pre.shape != hs.shape:
        raise DimensionError(f"gate pre-activations {pre.shape} are not aligned with frames {hs.shape}")
    return pre, T.sigmoid(pre)


def frame_logits_from_gates(pre: Tensor) -> Tensor:
    """Per-frame attention logit: the mean of that frame's gate pre-activations."""
    return T.mean(pre, axis=-1)


def gated_attention_pool(ctx: Tensor, hs: Tensor, params: GatedAttentionParams) -> tuple[PooledStats, Tensor, Tensor]:
    """Gated-attention statistics pooling.

    Each frame of ``hs`` is gated elementwise by ``sigmoid(pre)``, and the
    frame weight is a softmax over the mean of ``pre``, so the gate and the
    frame attention share the same parameters.

    Returns the pooled statistics, the frame weights and the gates.
    """
    pre, gates = _gate_parts(ctx, hs, params)
    z = T.mul(gates, hs)
    alpha = T.softmax_over_frames(frame_logits_from_gates(pre))
    return weighted_stats(z, alpha), alpha, gates


def gate_only_pool(ctx: Tensor, hs: Tensor, params: GatedAttentionParams) -> PooledStats:
    _, gates = _gate_parts(ctx, hs, params)
    z = T.mul(gates, hs)
    n = hs.shape[-2]
    alpha = Tensor(np.full(hs.shape[:-1], 1.0 / n))
    return weighted_stats(z, alpha)


def attention_only_pool(ctx: Tensor, hs: Tensor, params: GatedAttentionParams) -> PooledStats:
    pre, _ = _gate_parts(ctx, hs, params)
    alpha = T.softmax_over_frames(frame_logits_from_gates(pre))
    return weighted_stats(hs, alpha)
