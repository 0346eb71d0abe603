"""
Hebbian plasticity rules.

All update functions return the weight delta computed from the current
(pre-update) weights and leave the state untouched; hebbian_step is the one
place where a delta is applied. A batch of inputs always produces the mean
of the per-sample deltas.

Rules
    plain_hebb      dw = eta * y * x
    decay_hebb      dw = eta * y * (x - w)            (every neuron)
    wta             dw = eta * y * (x - w)            (closest neuron only)
    linear_hpca     dw_i = eta * y_i * (x - sum_{j<=i} y_j w_j)
    nonlinear_hpca  dw_i = eta * f(y_i) * (x - sum_{j<=i} f(y_j) w_j)
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from hebbian_engine.tensor_core import DimensionError, Rng, Tensor, check_finite

ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda y: y,
    "relu": lambda y: np.maximum(y, 0.0),
}


class RuleKind(str, Enum):
    PLAIN_HEBB = "plain_hebb"
    DECAY_HEBB = "decay_hebb"
    WTA = "wta"
    LINEAR_HPCA = "linear_hpca"
    NONLINEAR_HPCA = "nonlinear_hpca"


@dataclass(frozen=True)
class Rule:
    kind: RuleKind
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"Unknown activation '{self.activation}', expected one of {list(ACTIVATIONS)}"
            )
        if self.kind == RuleKind.LINEAR_HPCA and self.activation != "identity":
            raise ValueError("linear_hpca is only defined with the identity activation")

    @classmethod
    def from_name(cls, name: str, activation: str = "relu") -> "Rule":
        kind = RuleKind(name)
        if kind != RuleKind.NONLINEAR_HPCA:
            activation = "identity"
        return cls(kind, activation)

    @property
    def is_hpca(self) -> bool:
        return self.kind in (RuleKind.LINEAR_HPCA, RuleKind.NONLINEAR_HPCA)

    def f(self, y: np.ndarray) -> np.ndarray:
        return ACTIVATIONS[self.activation](y)


LINEAR_HPCA = Rule(RuleKind.LINEAR_HPCA)
NONLINEAR_HPCA = Rule(RuleKind.NONLINEAR_HPCA, "relu")


@dataclass
class HebbianLayerState:
    """
    Weights of one Hebbian layer plus the running input mean used for centering.
    """

    weights: Tensor
    running_input_mean: Tensor
    mean_momentum: float = 0.1
    learning_rate: float = 1e-3

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.running_input_mean = np.ascontiguousarray(
            self.running_input_mean, dtype=np.float64
        )
        if self.weights.ndim != 2:
            raise DimensionError(f"weights must be 2-d, got {self.weights.shape}")
        if self.running_input_mean.shape != (self.input_dim,):
            raise DimensionError(
                f"running_input_mean {self.running_input_mean.shape} does not match "
                f"weights {self.weights.shape}"
            )
        if not 0.0 < self.mean_momentum <= 1.0:
            raise ValueError(f"mean_momentum must be in (0, 1], got {self.mean_momentum}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")

    @classmethod
    def initialize(
        cls,
        num_neurons: int,
        input_dim: int,
        rng: Rng,
        learning_rate: float = 1e-3,
        mean_momentum: float = 0.1,
    ) -> "HebbianLayerState":
        bound = 1.0 / np.sqrt(input_dim)
        return cls(
            weights=rng.uniform(-bound, bound, (num_neurons, input_dim)),
            running_input_mean=np.zeros(input_dim),
            mean_momentum=mean_momentum,
            learning_rate=learning_rate,
        )

    @property
    def num_neurons(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    def apply(self, delta: Tensor) -> None:
        if delta.shape != self.weights.shape:
            raise DimensionError(
                f"Delta {delta.shape} does not match weights {self.weights.shape}"
            )
        self.weights = self.weights + delta
        check_finite(self.weights, "Hebbian weights")


def _check_vector(state: HebbianLayerState, x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (state.input_dim,):
        raise DimensionError(
            f"Input {x.shape} does not match weights {state.weights.shape}"
        )
    return x


def _check_batch(state: HebbianLayerState, X: Tensor) -> Tensor:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.input_dim:
        raise DimensionError(
            f"Input batch {X.shape} does not match weights {state.weights.shape}"
        )
    return X


def plain_hebb_update(state: HebbianLayerState, x: Tensor) -> Tensor:
    x = _check_vector(state, x)
    y = state.weights @ x
    return state.learning_rate * np.outer(y, x)


def decay_hebb_update(state: HebbianLayerState, x: Tensor) -> Tensor:
    x = _check_vector(state, x)
    y = state.weights @ x
    return state.learning_rate * y[:, None] * (x[None, :] - state.weights)


def wta_winner(state: HebbianLayerState, x: Tensor) -> int:
    """Index of the neuron closest to x in Euclidean distance, lowest index on ties."""
    distances = np.linalg.norm(x[None, :] - state.weights, axis=1)
    return int(np.argmin(distances))


def wta_update(state: HebbianLayerState, x: Tensor) -> Tensor:
    x = _check_vector(state, x)
    winner = wta_winner(state, x)
    w = state.weights[winner]
    delta = np.zeros_like(state.weights)
    delta[winner] = state.learning_rate * float(w @ x) * (x - w)
    return delta


def hpca_update(state: HebbianLayerState, X: Tensor, rule: Rule) -> Tensor:
    """
    Mean over the batch of the Sanger-style HPCA delta.

    In matrix form: dW = eta / B * (F^T X - tril(F^T F) W) with F = f(X W^T);
    the lower triangle (diagonal included) encodes the sum over j <= i.
    """
    if not rule.is_hpca:
        raise ValueError(f"hpca_update requires an HPCA rule, got {rule.kind.value}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X = _check_batch(state, X)
    F = rule.f(X @ state.weights.T)
    batch = X.shape[0]
    hebb = F.T @ X
    reconstruction = np.tril(F.T @ F) @ state.weights
    return state.learning_rate * (hebb - reconstruction) / batch


def batch_delta(state: HebbianLayerState, X: Tensor, rule: Rule) -> Tensor:
    """
    Mini-batch delta for any rule: per-sample deltas from the same weights, averaged.
    """
    if rule.is_hpca:
        return hpca_update(state, X, rule)

    X = _check_batch(state, X)
    batch = X.shape[0]
    W = state.weights
    Y = X @ W.T
    if rule.kind == RuleKind.PLAIN_HEBB:
        return state.learning_rate * (Y.T @ X) / batch
    if rule.kind == RuleKind.DECAY_HEBB:
        return state.learning_rate * (Y.T @ X - Y.sum(axis=0)[:, None] * W) / batch

    # WTA: only the closest neuron responds to each sample
    distances = (
        np.sum(X**2, axis=1)[:, None] - 2.0 * X @ W.T + np.sum(W**2, axis=1)[None, :]
    )
    winners = np.argmin(distances, axis=1)
    gate = np.zeros_like(Y)
    gate[np.arange(batch), winners] = Y[np.arange(batch), winners]
    return state.learning_rate * (gate.T @ X - gate.sum(axis=0)[:, None] * W) / batch


def representation_error(state: HebbianLayerState, X: Tensor, rule: Rule) -> float:
    """
    Mean over the batch of ||x - sum_j f(y_j) w_j||^2 over all neurons.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X = _check_batch(state, X)
    F = rule.f(X @ state.weights.T)
    residual = X - F @ state.weights
    return float(np.mean(np.sum(residual**2, axis=1)))


def center_inputs(state: HebbianLayerState, X: Tensor, training: bool) -> Tensor:
    """
    Subtract the running input mean. In training mode the mean is first moved
    towards the batch mean with momentum state.mean_momentum.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    X = _check_batch(state, X)
    if training:
        m = state.mean_momentum
        state.running_input_mean = (1.0 - m) * state.running_input_mean + m * X.mean(
            axis=0
        )
    return X - state.running_input_mean


def hebbian_step(
    state: HebbianLayerState, inputs: Tensor, rule: Rule
) -> HebbianLayerState:
    """
    One unsupervised update from a batch of input vectors of shape (..., D).

    All leading axes are treated as one batch axis, so the delta is averaged
    over every vector in the batch and applied once.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[-1] != state.input_dim:
        raise DimensionError(
            f"Inputs {inputs.shape} do not match weights {state.weights.shape}"
        )
    X = inputs.reshape(-1, state.input_dim)
    centered = center_inputs(state, X, training=True)
    state.apply(batch_delta(state, centered, rule))
    return state


def conv_hebbian_step(
    state: HebbianLayerState, patches: Tensor, rule: Rule
) -> HebbianLayerState:
    """
    Shared-filter update from im2col patches (B x P x D): the per-offset
    deltas are averaged over batch and spatial positions and applied once.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3:
        raise DimensionError(f"Expected B x P x D patches, got shape {patches.shape}")
    return hebbian_step(state, patches, rule)
