"""
Dense float64 tensor primitives shared by the rest of the engine.

A Tensor is a C-contiguous numpy array of dtype float64. The helpers here
validate shapes, lower convolutions to matrix products (im2col / col2im),
and provide the seeded random number generator used everywhere else.
"""

from __future__ import annotations

import zlib
from typing import Iterable, Sequence

import numpy as np
import numpy.typing as npt

Tensor = npt.NDArray[np.float64]


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


def as_tensor(values, name: str = "tensor") -> Tensor:
    """
    Convert to a contiguous float64 array and check that every element is finite.
    """
    t = np.ascontiguousarray(values, dtype=np.float64)
    check_finite(t, name)
    return t


def check_finite(t: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"{name} contains NaN or Inf values")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of a (m x k) and b (k x n).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"Cannot multiply shapes {a.shape} and {b.shape}")
    return np.ascontiguousarray(a @ b)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Spatial output size of a convolution or pooling window."""
    return (size + 2 * pad - kernel) // stride + 1


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def im2col(
    x: Tensor,
    kernel: int | tuple[int, int],
    stride: int | tuple[int, int] = 1,
    padding: int | tuple[int, int] = 0,
) -> Tensor:
    """
    Lower a B x C x H x W input into B x P x (C*kh*kw) patches.

    P = out_h * out_w patches per image in row-major order of the output grid.
    Each patch is flattened in (channel, row, col) order; padding is zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"im2col expects a 4-d input, got shape {x.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x.shape
    if kh > H + 2 * ph or kw > W + 2 * pw or kh < 1 or kw < 1:
        raise DimensionError(
            f"Kernel {(kh, kw)} does not fit input {x.shape} with padding {(ph, pw)}"
        )

    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_h = conv_output_size(H, kh, sh, ph)
    out_w = conv_output_size(W, kw, sw, pw)

    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # B, C, out_h, out_w, kh, kw
    windows = windows[:, :, ::sh, ::sw][:, :, :out_h, :out_w]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B, out_h * out_w, C * kh * kw)
    return np.ascontiguousarray(cols)


def col2im(
    cols: Tensor,
    input_shape: Sequence[int],
    kernel: int | tuple[int, int],
    stride: int | tuple[int, int] = 1,
    padding: int | tuple[int, int] = 0,
) -> Tensor:
    """
    Adjoint of im2col: scatter-add B x P x (C*kh*kw) patches back to B x C x H x W.
    """
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = input_shape
    out_h = conv_output_size(H, kh, sh, ph)
    out_w = conv_output_size(W, kw, sw, pw)
    if cols.shape != (B, out_h * out_w, C * kh * kw):
        raise DimensionError(
            f"Patch tensor {cols.shape} does not match input {tuple(input_shape)}"
        )

    patches = cols.reshape(B, out_h, out_w, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    padded = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    # fixed (i, j) order keeps the summation order deterministic
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + sh * out_h : sh, j : j + sw * out_w : sw] += patches[
                :, :, i, j
            ]
    return np.ascontiguousarray(padded[:, :, ph : ph + H, pw : pw + W])


def reduce_mean(t: Tensor, axes: Iterable[int]) -> Tensor:
    """
    Arithmetic mean over the listed axes; the reduced axes are removed.
    """
    t = np.asarray(t, dtype=np.float64)
    axes = list(axes)
    normalized = []
    for axis in axes:
        if not -t.ndim <= axis < t.ndim:
            raise ValueError(f"Axis {axis} out of range for shape {t.shape}")
        normalized.append(axis % t.ndim)
    if len(set(normalized)) != len(normalized):
        raise ValueError(f"Duplicate axes in {axes}")
    return np.asarray(np.mean(t, axis=tuple(normalized)))


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


class Rng:
    """
    Seeded PCG64 generator. Same seed, same stream, on every platform.

    Independent sub-streams are derived with spawn(*keys), so the data split,
    weight init, dropout masks and batch order never consume each other's draws.
    """

    def __init__(self, seed: int, keys: Sequence[int] = ()):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        sequence = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def spawn(self, *keys) -> "Rng":
        return Rng(self.seed, self.keys + tuple(_key_to_int(k) for k in keys))

    def uniform(self, low: float, high: float, shape) -> Tensor:
        return self.generator.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> Tensor:
        return self.generator.normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> dict:
        return {
            "seed": self.seed,
            "keys": list(self.keys),
            "bit_generator": self.generator.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.keys = tuple(state["keys"])
        self.generator.bit_generator.state = state["bit_generator"]
