"""Attention gates: convolutional additive self-attention and calibration.

Two families live here.  The additive self-attention used inside the
bottleneck block projects the input to Q/K/V with a 1x1 convolution, runs Q
and K through a spatial gate (position emphasis) and a channel gate (global
channel reweighting), multiplies the summed result elementwise with V, and
finishes with a depthwise 3x3 convolution plus dropout.  There is no pairwise
softmax anywhere — the attention is purely convolutional and additive.

The calibration gates used by the downsampling block are a dilated-conv
spatial mask built from channel-mean/channel-max maps, and a squeeze-excite
style channel gate.  All gate outputs are sigmoid-squashed, so every gate
scales its input by factors strictly inside (0, 1).

All convolutions and affine maps in this module are bias-free; their
normalization-free gates get their operating point from the sigmoid instead.
"""

from __future__ import annotations

import math

from .rng import Rng
from .tensor import Parameter, Tensor, kaiming_uniform, sigmoid, slice4
from .nn import (
    Conv2d,
    Conv2dSpec,
    Linear,
    Module,
    channel_max,
    channel_mean,
    concat_channels,
    conv2d,
    dropout,
    global_avg_pool,
    linear,
)


def gate_hidden(channels: int) -> int:
    """Hidden width of the channel-gate MLP: ceil(channels / 4)."""
    return math.ceil(channels / 4)


def spatial_gate(x: Tensor, dw_spec: Conv2dSpec, dw_weight: Tensor,
                 pw_spec: Conv2dSpec, pw_weight: Tensor) -> Tensor:
    """y = x * sigmoid(conv3x3(depthwise3x3(x))); shape preserved."""
    gate = sigmoid(conv2d(conv2d(x, dw_spec, dw_weight), pw_spec, pw_weight))
    return x * gate


def channel_gate(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """y = x * sigmoid(mlp(gap(x))), a per-channel scale in (0, 1).

    The MLP maps C -> ceil(C/4) -> C with a ReLU between the layers; the
    (N, C, 1, 1) gate broadcasts across all spatial positions.
    """
    squeezed = global_avg_pool(x)
    gate = sigmoid(linear(linear(squeezed, w1).relu(), w2))
    return x * gate


class SpatialGate(Module):
    """Learnable spatial gate: depthwise 3x3 then full 3x3 producing gate logits."""

    def __init__(self, channels: int, rng: Rng):
        super().__init__()
        self.dw_spec = Conv2dSpec(channels, channels, kernel=3, padding=1,
                                  groups=channels, has_bias=False)
        self.pw_spec = Conv2dSpec(channels, channels, kernel=3, padding=1, has_bias=False)
        self.dw_weight = Parameter(kaiming_uniform(self.dw_spec.weight_shape, rng, 9).data)
        self.pw_weight = Parameter(
            kaiming_uniform(self.pw_spec.weight_shape, rng, channels * 9).data)

    def forward(self, x: Tensor) -> Tensor:
        return spatial_gate(x, self.dw_spec, self.dw_weight, self.pw_spec, self.pw_weight)


class ChannelGate(Module):
    """Learnable squeeze-excite channel gate with a ceil(C/4) hidden layer."""

    def __init__(self, channels: int, rng: Rng):
        super().__init__()
        hidden = gate_hidden(channels)
        self.fc1 = Linear(channels, hidden, rng, has_bias=False)
        self.fc2 = Linear(hidden, channels, rng, has_bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return channel_gate(x, self.fc1.weight, self.fc2.weight)


class CasAttention(Module):
    """Convolutional additive self-attention.

    Q, K, V come from one bias-free 1x1 convolution C -> 3C split
    contiguously as [Q | K | V].  Q and K each pass a spatial gate followed
    by a channel gate; the gated sum multiplies V elementwise; a depthwise
    3x3 convolution and dropout finish the block.  Output shape equals input
    shape, and the map is linear in V when the gate inputs are held fixed.
    """

    def __init__(self, channels: int, rng: Rng, dropout_p: float = 0.0):
        super().__init__()
        self.channels = channels
        self.dropout_p = dropout_p
        self.qkv_spec = Conv2dSpec(channels, 3 * channels, kernel=1, has_bias=False)
        self.qkv_weight = Parameter(kaiming_uniform(self.qkv_spec.weight_shape, rng, channels).data)
        self.sg_q = SpatialGate(channels, rng)
        self.cg_q = ChannelGate(channels, rng)
        self.sg_k = SpatialGate(channels, rng)
        self.cg_k = ChannelGate(channels, rng)
        self.out_spec = Conv2dSpec(channels, channels, kernel=3, padding=1,
                                   groups=channels, has_bias=False)
        self.out_weight = Parameter(kaiming_uniform(self.out_spec.weight_shape, rng, 9).data)

    def forward(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        c = self.channels
        qkv = conv2d(x, self.qkv_spec, self.qkv_weight)
        q = slice4(qkv, c=slice(0, c))
        k = slice4(qkv, c=slice(c, 2 * c))
        v = slice4(qkv, c=slice(2 * c, 3 * c))
        q_hat = self.cg_q(self.sg_q(q))
        k_hat = self.cg_k(self.sg_k(k))
        fused = conv2d((q_hat + k_hat) * v, self.out_spec, self.out_weight)
        return dropout(fused, self.dropout_p, training, rng)


def sa_calibrate(x: Tensor, spec: Conv2dSpec, weight: Tensor) -> Tensor:
    """Spatial calibration: a single-channel dilated-conv mask rescales x.

    The mask is sigmoid(conv([channel-mean; channel-max], k=7, dilation=2,
    padding=6, out_channels=1)) and broadcasts across channels.
    """
    pooled = concat_channels([channel_mean(x), channel_max(x)])
    mask = sigmoid(conv2d(pooled, spec, weight))
    return x * mask


class SpatialCalibrate(Module):
    """Learnable spatial calibration gate (7x7 dilation-2 conv on pooled maps)."""

    def __init__(self, rng: Rng):
        super().__init__()
        self.spec = Conv2dSpec(2, 1, kernel=7, padding=6, dilation=2, has_bias=False)
        self.weight = Parameter(kaiming_uniform(self.spec.weight_shape, rng, 2 * 49).data)

    def forward(self, x: Tensor) -> Tensor:
        return sa_calibrate(x, self.spec, self.weight)


class ChannelCalibrate(ChannelGate):
    """Channel calibration gate: same contract as ChannelGate, its own weights."""
