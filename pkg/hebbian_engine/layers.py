"""
Layer forward and backward passes.

Each layer keeps its parameters in `params` and its non-trainable state in
`buffers`. forward() returns (output, cache); backward() takes that cache and
the output gradient and returns (input gradient, parameter gradients).
"""

from __future__ import annotations

from enum import Enum
from typing import Any

import numpy as np

from hebbian_engine.tensor_core import (
    DimensionError,
    Rng,
    Tensor,
    col2im,
    conv_output_size,
    im2col,
)


class BatchNormMode(str, Enum):
    STANDARD = "standard"
    VARIANCE_AVERAGED = "variance_averaged"


def conv_forward(
    x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, pad: int = 0
) -> Tensor:
    """
    Cross-correlation of B x C x H x W input with O x C x kh x kw filters.
    """
    out, _ = _conv_forward(x, weights, bias, stride, pad)
    return out


def _conv_forward(x, weights, bias, stride, pad):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or weights.ndim != 4 or x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"Input {x.shape} is not compatible with filters {weights.shape}"
        )
    O, _, kh, kw = weights.shape
    B, _, H, W = x.shape
    cols = im2col(x, (kh, kw), stride, pad)
    out_h = conv_output_size(H, kh, stride, pad)
    out_w = conv_output_size(W, kw, stride, pad)
    out = cols @ weights.reshape(O, -1).T + bias
    out = out.reshape(B, out_h, out_w, O).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def maxpool_forward(
    x: Tensor, kh: int, kw: int, stride: int
) -> tuple[Tensor, np.ndarray]:
    """
    Per-window maximum. Returns the output and, for every window, the index of
    the maximum inside the flattened window (first occurrence in row-major order).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"maxpool expects a 4-d input, got shape {x.shape}")
    B, C, H, W = x.shape
    if kh > H or kw > W:
        raise DimensionError(f"Pooling window {(kh, kw)} larger than input {x.shape}")
    cols = im2col(x.reshape(B * C, 1, H, W), (kh, kw), stride, 0)
    indices = np.argmax(cols, axis=2)
    out = np.take_along_axis(cols, indices[..., None], axis=2)[..., 0]
    out_h = conv_output_size(H, kh, stride, 0)
    out_w = conv_output_size(W, kw, stride, 0)
    return out.reshape(B, C, out_h, out_w), indices.reshape(B, C, out_h * out_w)


def maxpool_backward(
    dout: Tensor, indices: np.ndarray, input_shape, kh: int, kw: int, stride: int
) -> Tensor:
    """Route each output gradient to the input element that won its window."""
    B, C, H, W = input_shape
    flat_indices = indices.reshape(B * C, -1)
    dcols = np.zeros((B * C, flat_indices.shape[1], kh * kw))
    np.put_along_axis(
        dcols, flat_indices[..., None], dout.reshape(B * C, -1)[..., None], axis=2
    )
    dx = col2im(dcols, (B * C, 1, H, W), (kh, kw), stride, 0)
    return dx.reshape(B, C, H, W)


def dropout_forward(
    x: Tensor, rate: float, training: bool, rng: Rng | None
) -> tuple[Tensor, np.ndarray | None]:
    """
    Inverted dropout: zero with probability `rate` and rescale survivors by 1/(1-rate).
    Returns the output and the mask (None when the layer is the identity).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("Dropout in training mode needs an Rng")
    mask = (rng.uniform(0.0, 1.0, x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


class Layer:
    """Base class for all layers."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def forward(self, x: Tensor, training: bool = False, rng: Rng | None = None):
        raise NotImplementedError

    def backward(self, cache: Any, dout: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        raise NotImplementedError


class Conv2D(Layer):
    kind = "conv"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int],
        stride: int = 1,
        pad: int = 0,
        rng: Rng | None = None,
    ):
        super().__init__()
        self.kernel = (int(kernel[0]), int(kernel[1]))
        self.stride = int(stride)
        self.pad = int(pad)
        fan_in = in_channels * self.kernel[0] * self.kernel[1]
        bound = 1.0 / np.sqrt(fan_in)
        shape = (out_channels, in_channels, *self.kernel)
        self.params["weight"] = (
            rng.uniform(-bound, bound, shape) if rng is not None else np.zeros(shape)
        )
        self.params["bias"] = np.zeros(out_channels)

    def output_shape(self, input_shape):
        C, H, W = input_shape
        return (
            self.params["weight"].shape[0],
            conv_output_size(H, self.kernel[0], self.stride, self.pad),
            conv_output_size(W, self.kernel[1], self.stride, self.pad),
        )

    def forward(self, x, training=False, rng=None):
        out, cols = _conv_forward(
            x, self.params["weight"], self.params["bias"], self.stride, self.pad
        )
        return out, (x.shape, cols)

    def backward(self, cache, dout):
        input_shape, cols = cache
        weight = self.params["weight"]
        O = weight.shape[0]
        B = dout.shape[0]
        dout_cols = dout.transpose(0, 2, 3, 1).reshape(B, -1, O)
        dweight = np.einsum("bpo,bpd->od", dout_cols, cols).reshape(weight.shape)
        dbias = dout_cols.sum(axis=(0, 1))
        dcols = dout_cols @ weight.reshape(O, -1)
        dx = col2im(dcols, input_shape, self.kernel, self.stride, self.pad)
        return dx, {"weight": dweight, "bias": dbias}


class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, kernel: tuple[int, int], stride: int):
        super().__init__()
        self.kernel = (int(kernel[0]), int(kernel[1]))
        self.stride = int(stride)

    def output_shape(self, input_shape):
        C, H, W = input_shape
        return (
            C,
            conv_output_size(H, self.kernel[0], self.stride, 0),
            conv_output_size(W, self.kernel[1], self.stride, 0),
        )

    def forward(self, x, training=False, rng=None):
        out, indices = maxpool_forward(x, *self.kernel, self.stride)
        return out, (x.shape, indices)

    def backward(self, cache, dout):
        input_shape, indices = cache
        return maxpool_backward(dout, indices, input_shape, *self.kernel, self.stride), {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        return np.maximum(x, 0.0), x > 0

    def backward(self, cache, dout):
        return dout * cache, {}


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, training=False, rng=None):
        return dropout_forward(x, self.rate, training, rng)

    def backward(self, mask, dout):
        return (dout if mask is None else dout * mask), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout):
        return dout.reshape(cache), {}


class Dense(Layer):
    kind = "fc"

    def __init__(self, in_features: int, out_features: int, rng: Rng | None = None):
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        shape = (out_features, in_features)
        self.params["weight"] = (
            rng.uniform(-bound, bound, shape) if rng is not None else np.zeros(shape)
        )
        self.params["bias"] = np.zeros(out_features)

    def output_shape(self, input_shape):
        return (self.params["weight"].shape[0],)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.params["weight"].shape[1]:
            raise DimensionError(
                f"Input {x.shape} does not match weights {self.params['weight'].shape}"
            )
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, x, dout):
        dx = dout @ self.params["weight"]
        return dx, {"weight": dout.T @ x, "bias": dout.sum(axis=0)}


def _channel_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) + tuple(range(2, x.ndim))


def _per_channel(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


class BatchNorm(Layer):
    """
    Batch normalization over the channel axis (axis 1) of B x C or B x C x H x W inputs.

    In VARIANCE_AVERAGED mode each channel is still mean-centered, but every
    channel is divided by the same scalar sqrt(mean_c(var_c) + eps), which keeps
    the relative order of channel variances. Running statistics are updated the
    same way in both modes. momentum=None means a cumulative average, used when
    statistics are re-estimated over one pass.
    """

    kind = "batchnorm"

    def __init__(
        self,
        channels: int,
        mode: BatchNormMode = BatchNormMode.STANDARD,
        momentum: float | None = 0.1,
        epsilon: float = 1e-5,
    ):
        super().__init__()
        if epsilon <= 0:
            raise ValueError(f"BatchNorm epsilon must be positive, got {epsilon}")
        self.mode = BatchNormMode(mode)
        self.momentum = momentum
        self.epsilon = float(epsilon)
        self.num_batches_tracked = 0
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def reset_running_stats(self) -> None:
        self.buffers["running_mean"] = np.zeros_like(self.buffers["running_mean"])
        self.buffers["running_var"] = np.ones_like(self.buffers["running_var"])
        self.num_batches_tracked = 0

    def _update_running(self, mean, var_unbiased):
        self.num_batches_tracked += 1
        m = self.momentum if self.momentum is not None else 1.0 / self.num_batches_tracked
        self.buffers["running_mean"] = (1.0 - m) * self.buffers["running_mean"] + m * mean
        self.buffers["running_var"] = (1.0 - m) * self.buffers[
            "running_var"
        ] + m * var_unbiased

    def forward(self, x, training=False, rng=None):
        return batchnorm_forward(x, self, self.mode, training)

    def backward(self, cache, dout):
        return batchnorm_backward(cache, dout, self.params["gamma"])


def batchnorm_forward(
    x: Tensor, state: BatchNorm, mode: BatchNormMode, training: bool
) -> tuple[Tensor, tuple]:
    """
    Normalize with batch statistics (training) or running statistics (eval).
    """
    x = np.asarray(x, dtype=np.float64)
    channels = state.params["gamma"].shape[0]
    if x.ndim < 2 or x.shape[1] != channels:
        raise DimensionError(f"Input {x.shape} does not have {channels} channels")
    axes = _channel_axes(x)
    eps = state.epsilon

    if training:
        if x.shape[0] < 2:
            raise ValueError(
                f"BatchNorm in training mode needs a batch of at least 2, got {x.shape[0]}"
            )
        count = x.size // channels
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        state._update_running(mean, var * count / (count - 1))
    else:
        mean = state.buffers["running_mean"]
        var = state.buffers["running_var"]

    if BatchNormMode(mode) == BatchNormMode.VARIANCE_AVERAGED:
        std = np.full(channels, np.sqrt(np.mean(var) + eps))
    else:
        std = np.sqrt(var + eps)

    x_hat = (x - _per_channel(mean, x.ndim)) / _per_channel(std, x.ndim)
    out = x_hat * _per_channel(state.params["gamma"], x.ndim) + _per_channel(
        state.params["beta"], x.ndim
    )
    cache = (x_hat, std, BatchNormMode(mode), training)
    return out, cache


def batchnorm_backward(cache, dout: Tensor, gamma: Tensor) -> tuple[Tensor, dict]:
    x_hat, std, mode, training = cache
    ndim = dout.ndim
    axes = _channel_axes(dout)
    dgamma = np.sum(dout * x_hat, axis=axes)
    dbeta = np.sum(dout, axis=axes)
    g = dout * _per_channel(gamma, ndim)

    if not training:
        return g / _per_channel(std, ndim), {"gamma": dgamma, "beta": dbeta}

    g_mean = _per_channel(g.mean(axis=axes), ndim)
    if mode == BatchNormMode.VARIANCE_AVERAGED:
        # shared divisor couples all channels through the averaged variance
        channels = gamma.shape[0]
        coupling = np.sum(g * x_hat) / (g.size // channels) / channels
        dx = (g - g_mean - x_hat * coupling) / std[0]
    else:
        gx_mean = _per_channel(np.mean(g * x_hat, axis=axes), ndim)
        dx = (g - g_mean - x_hat * gx_mean) / _per_channel(std, ndim)
    return dx, {"gamma": dgamma, "beta": dbeta}
