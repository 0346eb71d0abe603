"""
Reverse-mode gradients over the layer set, cross-entropy loss and SGD with
momentum, Nesterov correction, coupled L2 decay and the step learning-rate
schedule (constant, then halved every two epochs).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from hebbian_engine.tensor_core import DimensionError, Tensor


@dataclass
class TapeNode:
    op: str
    layer_index: int
    layer: Any
    cache: Any
    parent: int | None = None


class Tape:
    """
    Records layer applications during a forward pass and replays them in
    reverse. Each node is visited exactly once; a tape can be consumed once.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._consumed = False

    def record(self, node: TapeNode) -> None:
        node.parent = len(self.nodes) - 1 if self.nodes else None
        self.nodes.append(node)

    def backward(self, dout: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        """
        Returns the gradient w.r.t. the tape input and parameter gradients keyed
        as `layers.<index>.<name>`.
        """
        if self._consumed:
            raise RuntimeError("Tape has already been used for a backward pass")
        self._consumed = True
        grads: dict[str, Tensor] = {}
        index = len(self.nodes) - 1
        while index is not None and index >= 0:
            node = self.nodes[index]
            dout, layer_grads = node.layer.backward(node.cache, dout)
            for name, value in layer_grads.items():
                grads[f"layers.{node.layer_index}.{name}"] = value
            node.cache = None
            index = node.parent
        return dout, grads


def cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """
    Mean negative log-softmax of the true class, and its gradient w.r.t. logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"Logits {logits.shape} do not match labels {labels.shape}"
        )
    B, K = logits.shape
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"Labels must be in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    log_probs = shifted - log_norm[:, None]
    loss = -float(np.mean(log_probs[np.arange(B), labels]))
    dlogits = np.exp(log_probs)
    dlogits[np.arange(B), labels] -= 1.0
    return loss, dlogits / B


@dataclass(frozen=True)
class ConstantThenHalve:
    constant_epochs: int = 10
    halve_every: int = 2

    def factor(self, epoch: int) -> float:
        if epoch < self.constant_epochs:
            return 1.0
        halvings = (epoch - self.constant_epochs) // self.halve_every + 1
        return 2.0 ** (-halvings)


@dataclass(frozen=True)
class SgdConfig:
    lr0: float = 1e-3
    momentum: float = 0.9
    nesterov: bool = True
    l2: float = 5e-2
    schedule: ConstantThenHalve = field(default_factory=ConstantThenHalve)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be nonnegative, got {self.l2}")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.schedule.factor(epoch)


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    velocity: dict[str, Tensor],
    config: SgdConfig,
    epoch: int,
) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """
    g' = g + l2 * w;  v = mu * v + g';  w = w - lr * (mu * v + g' if nesterov else v)

    Parameters without a gradient are returned unchanged.
    """
    lr = config.lr(epoch)
    mu = config.momentum
    new_params, new_velocity = dict(params), dict(velocity)
    for name, grad in grads.items():
        w = params[name]
        if grad.shape != w.shape:
            raise DimensionError(
                f"Gradient for '{name}' has shape {grad.shape}, parameter has {w.shape}"
            )
        g = grad + config.l2 * w
        v = mu * velocity.get(name, np.zeros_like(w)) + g
        update = mu * v + g if config.nesterov else v
        new_params[name] = w - lr * update
        new_velocity[name] = v
    return new_params, new_velocity
