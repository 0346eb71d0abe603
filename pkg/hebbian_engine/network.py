"""
Declarative architecture (LayerSpec / NetworkSpec), network assembly,
probe cut-points and the checkpoint file format.

Checkpoint layout (all integers little-endian):
    b"HEBBSEED-CKPT 1\\n"
    uint32 length + NetworkSpec canonical text (utf-8)
    uint32 number of tensors
    per tensor: uint16 name length, name, uint8 ndim, uint32 dims..., float64 data
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from hebbian_engine.autodiff_sgd import Tape, TapeNode
from hebbian_engine.layers import (
    BatchNorm,
    BatchNormMode,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool2D,
    ReLU,
)
from hebbian_engine.tensor_core import Rng, Tensor

CHECKPOINT_MAGIC = b"HEBBSEED-CKPT 1\n"
PROBE_NAMES = ("L1", "L2", "L3", "L4", "L5")
FINAL_PROBE = "Final"
LAYER_KINDS = ("conv", "maxpool", "relu", "dropout", "fc", "batchnorm", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """
    One stage of the network. Only the fields relevant to `kind` are used.
    For batchnorm, `bn_mode` is the mode used during Hebbian training;
    supervised training always uses standard BatchNorm.
    """

    kind: str
    out_channels: int = 0
    kernel: tuple[int, int] = (0, 0)
    stride: int = 1
    pad: int = 0
    rate: float = 0.0
    out_features: int = 0
    bn_mode: BatchNormMode = BatchNormMode.STANDARD

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind '{self.kind}'")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"Dropout rate must be in [0, 1), got {self.rate}")

    def to_text(self) -> str:
        kh, kw = self.kernel
        if self.kind == "conv":
            return f"conv out={self.out_channels} k={kh}x{kw} s={self.stride} p={self.pad}"
        if self.kind == "maxpool":
            return f"maxpool k={kh}x{kw} s={self.stride}"
        if self.kind == "dropout":
            return f"dropout rate={self.rate!r}"
        if self.kind == "fc":
            return f"fc out={self.out_features}"
        if self.kind == "batchnorm":
            return f"batchnorm mode={BatchNormMode(self.bn_mode).value}"
        return self.kind

    @classmethod
    def from_text(cls, text: str) -> "LayerSpec":
        kind, *items = text.split()
        values = dict(item.split("=", 1) for item in items)
        kwargs = {}
        if "k" in values:
            kh, kw = values["k"].split("x")
            kwargs["kernel"] = (int(kh), int(kw))
        if "s" in values:
            kwargs["stride"] = int(values["s"])
        if "p" in values:
            kwargs["pad"] = int(values["p"])
        if "rate" in values:
            kwargs["rate"] = float(values["rate"])
        if "mode" in values:
            kwargs["bn_mode"] = BatchNormMode(values["mode"])
        if "out" in values:
            key = "out_channels" if kind == "conv" else "out_features"
            kwargs[key] = int(values["out"])
        return cls(kind, **kwargs)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    probe_points: dict[int, str]
    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10

    def __post_init__(self):
        names = sorted(self.probe_points.values())
        if names != sorted(PROBE_NAMES):
            raise ValueError(f"Expected probe points {PROBE_NAMES}, got {names}")
        for index in self.probe_points:
            if not 0 <= index < len(self.layers):
                raise ValueError(f"Probe point index {index} outside the layer list")
        last = self.layers[-1]
        if last.kind != "fc" or last.out_features != self.num_classes:
            raise ValueError(
                f"Final layer must be fc with {self.num_classes} outputs, got '{last.to_text()}'"
            )

    def probe_index(self, probe: str) -> int:
        """Index of the last layer belonging to the probe block."""
        if probe == FINAL_PROBE:
            return len(self.layers) - 1
        for index, name in self.probe_points.items():
            if name == probe:
                return index
        raise ValueError(
            f"Unknown probe '{probe}', expected one of {PROBE_NAMES + (FINAL_PROBE,)}"
        )

    def to_text(self) -> str:
        C, H, W = self.input_shape
        lines = [f"input {C}x{H}x{W}", f"classes {self.num_classes}"]
        lines += [f"layer {layer.to_text()}" for layer in self.layers]
        lines += [
            f"probe {index} {name}" for index, name in sorted(self.probe_points.items())
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        layers, probes = [], {}
        input_shape, num_classes = None, None
        for line in text.strip().splitlines():
            key, rest = line.split(" ", 1)
            if key == "input":
                input_shape = tuple(int(v) for v in rest.split("x"))
            elif key == "classes":
                num_classes = int(rest)
            elif key == "layer":
                layers.append(LayerSpec.from_text(rest))
            elif key == "probe":
                index, name = rest.split()
                probes[int(index)] = name
            else:
                raise ValueError(f"Unrecognised network spec line: '{line}'")
        return cls(tuple(layers), probes, input_shape, num_classes)


def default_network_spec(
    num_classes: int = 10,
    widths: Sequence[int] = (96, 128, 192, 256, 300),
    input_shape: tuple[int, int, int] = (3, 32, 32),
    pooling: bool = True,
    variance_averaged: Iterable[str] = ("L4", "L5"),
    dropout: float = 0.5,
) -> NetworkSpec:
    """
    Five feature blocks plus a linear classifier:

        L1  conv 5x5 p2 + BN + ReLU + maxpool 2x2
        L2  conv 3x3 p1 + BN + ReLU
        L3  conv 3x3 p1 + BN + ReLU + maxpool 2x2
        L4  conv 3x3 p1 + BN + ReLU
        L5  flatten + fc + BN + ReLU
        classifier  dropout + fc num_classes
    """
    if len(widths) != 5:
        raise ValueError(f"Expected 5 layer widths, got {list(widths)}")
    variance_averaged = set(variance_averaged)

    def bn(block):
        mode = (
            BatchNormMode.VARIANCE_AVERAGED
            if block in variance_averaged
            else BatchNormMode.STANDARD
        )
        return LayerSpec("batchnorm", bn_mode=mode)

    pool = [LayerSpec("maxpool", kernel=(2, 2), stride=2)] if pooling else []
    blocks = {
        "L1": [LayerSpec("conv", widths[0], (5, 5), 1, 2), bn("L1"), LayerSpec("relu"), *pool],
        "L2": [LayerSpec("conv", widths[1], (3, 3), 1, 1), bn("L2"), LayerSpec("relu")],
        "L3": [LayerSpec("conv", widths[2], (3, 3), 1, 1), bn("L3"), LayerSpec("relu"), *pool],
        "L4": [LayerSpec("conv", widths[3], (3, 3), 1, 1), bn("L4"), LayerSpec("relu")],
        "L5": [
            LayerSpec("flatten"),
            LayerSpec("fc", out_features=widths[4]),
            bn("L5"),
            LayerSpec("relu"),
        ],
    }
    layers, probes = [], {}
    for name, block in blocks.items():
        layers.extend(block)
        probes[len(layers) - 1] = name
    layers += [
        LayerSpec("dropout", rate=dropout),
        LayerSpec("fc", out_features=num_classes),
    ]
    return NetworkSpec(tuple(layers), probes, tuple(input_shape), num_classes)


HebbianHook = Callable[[int, Layer, Tensor], None]


class Sequential:
    """An ordered stack of layers with optional tape recording."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)
        self.extra_tensors: dict[str, Tensor] = {}

    def forward(
        self,
        x: Tensor,
        training: bool = False,
        rng: Rng | None = None,
        tape: Tape | None = None,
        stop: int | None = None,
        hook: HebbianHook | None = None,
    ) -> Tensor:
        """
        Run layers 0..stop (inclusive, all by default). `hook(index, layer, input)`
        is called before each layer runs, so it can update the layer first.
        """
        stop = len(self.layers) - 1 if stop is None else stop
        for index, layer in enumerate(self.layers[: stop + 1]):
            if hook is not None:
                hook(index, layer, x)
            layer_rng = rng.spawn(index) if rng is not None else None
            x, cache = layer.forward(x, training, layer_rng)
            if tape is not None:
                tape.record(TapeNode(layer.kind, index, layer, cache))
        return x

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"layers.{i}.{name}": value
            for i, layer in enumerate(self.layers)
            for name, value in layer.params.items()
        }

    def buffers(self) -> dict[str, Tensor]:
        return {
            f"layers.{i}.{name}": value
            for i, layer in enumerate(self.layers)
            for name, value in layer.buffers.items()
        }

    def state_dict(self) -> dict[str, Tensor]:
        return {**self.parameters(), **self.buffers()}

    def set_parameters(self, params: dict[str, Tensor]) -> None:
        for key, value in params.items():
            _, index, name = key.split(".", 2)
            layer = self.layers[int(index)]
            target = layer.params if name in layer.params else layer.buffers
            if name not in target:
                raise ValueError(f"Unknown tensor '{key}'")
            if target[name].shape != value.shape:
                raise ValueError(
                    f"Tensor '{key}' has shape {value.shape}, expected {target[name].shape}"
                )
            target[name] = np.array(value, dtype=np.float64)

    def load_state_dict(self, state: dict[str, Tensor]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        if missing:
            raise ValueError(f"Checkpoint is missing tensors: {sorted(missing)}")
        self.set_parameters({k: v for k, v in state.items() if k in expected})
        # Hebbian input means are not layer tensors; keep them alongside
        self.extra_tensors = {k: v for k, v in state.items() if k not in expected}


class Network(Sequential):
    """Layers assembled from a NetworkSpec."""

    def __init__(self, spec: NetworkSpec, rng: Rng | None = None, bn_momentum=0.1, bn_epsilon=1e-5):
        self.spec = spec
        layers = []
        shape = tuple(spec.input_shape)
        for index, layer_spec in enumerate(spec.layers):
            layer_rng = rng.spawn("init", index) if rng is not None else None
            layer = _build_layer(layer_spec, shape, layer_rng, bn_momentum, bn_epsilon)
            shape = layer.output_shape(shape)
            layers.append(layer)
        super().__init__(layers)

    def set_bn_mode(self, hebbian_phase: bool) -> None:
        """
        Hebbian phase: every BatchNorm takes the mode from its spec.
        Supervised phase: every BatchNorm is standard.
        """
        for layer_spec, layer in zip(self.spec.layers, self.layers):
            if isinstance(layer, BatchNorm):
                layer.mode = (
                    BatchNormMode(layer_spec.bn_mode)
                    if hebbian_phase
                    else BatchNormMode.STANDARD
                )

    def feature_shape(self, probe: str) -> tuple[int, ...]:
        shape = tuple(self.spec.input_shape)
        for layer in self.layers[: self.spec.probe_index(probe) + 1]:
            shape = layer.output_shape(shape)
        return shape


def _build_layer(spec: LayerSpec, input_shape, rng, bn_momentum, bn_epsilon) -> Layer:
    if spec.kind == "conv":
        return Conv2D(input_shape[0], spec.out_channels, spec.kernel, spec.stride, spec.pad, rng)
    if spec.kind == "maxpool":
        return MaxPool2D(spec.kernel, spec.stride)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "dropout":
        return Dropout(spec.rate)
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "fc":
        if len(input_shape) != 1:
            raise ValueError(f"fc layer needs a flat input, got shape {input_shape}")
        return Dense(input_shape[0], spec.out_features, rng)
    return BatchNorm(input_shape[0], spec.bn_mode, bn_momentum, bn_epsilon)


def forward_to_probe(
    network: Network,
    x: Tensor,
    probe: str,
    training: bool = False,
    rng: Rng | None = None,
    tape: Tape | None = None,
) -> Tensor:
    """
    Output of the named probe block flattened to B x features; `Final` gives logits.
    """
    stop = network.spec.probe_index(probe)
    out = network.forward(x, training=training, rng=rng, tape=tape, stop=stop)
    return out.reshape(out.shape[0], -1)


def predict(
    network: Sequential, images: Tensor, batch_size: int = 256, stop: int | None = None
) -> Tensor:
    """Eval-mode forward in fixed-size chunks."""
    outputs = [
        network.forward(images[start : start + batch_size], training=False, stop=stop)
        for start in range(0, len(images), batch_size)
    ]
    out = np.concatenate(outputs, axis=0)
    return out.reshape(out.shape[0], -1)


def write_tensor_file(path: str | Path, header: str, tensors: dict[str, Tensor]) -> None:
    """Write tensors in the checkpoint format, sorted by name."""
    encoded = header.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            value = np.ascontiguousarray(tensors[name], dtype="<f8")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<B", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(value.tobytes())


def read_tensor_file(path: str | Path) -> tuple[str, dict[str, Tensor]]:
    with open(path, "rb") as f:
        payload = f.read()
    if not payload.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a hebbseed checkpoint")
    offset = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal offset
        values = struct.unpack_from(fmt, payload, offset)
        offset += struct.calcsize(fmt)
        return values

    (header_len,) = take("<I")
    header = payload[offset : offset + header_len].decode("utf-8")
    offset += header_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = payload[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        tensors[name] = data.astype(np.float64).reshape(shape)
    return header, tensors


def save_checkpoint(path: str | Path, network: Network) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensor_file(path, network.spec.to_text(), {**network.state_dict(), **network.extra_tensors})
    return path


def load_checkpoint(
    path: str | Path, expected_spec: NetworkSpec | None = None, **network_kwargs
) -> Network:
    """
    Rebuild a Network from a checkpoint. If expected_spec is given, the stored
    spec must match it exactly.
    """
    header, tensors = read_tensor_file(path)
    if expected_spec is not None and header != expected_spec.to_text():
        raise ValueError(
            f"Checkpoint {path} was written for a different architecture:\n{header}"
        )
    network = Network(NetworkSpec.from_text(header), **network_kwargs)
    network.load_state_dict(tensors)
    return network
