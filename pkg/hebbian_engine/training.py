"""
Supervised training loops: linear classifiers on frozen features and
end-to-end backprop (BP baseline and fine-tuning), with per-epoch records and
early stopping on validation accuracy.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from hebbian_engine.autodiff_sgd import SgdConfig, Tape, cross_entropy, sgd_step
from hebbian_engine.layers import BatchNorm, Dense, Dropout
from hebbian_engine.network import (
    FINAL_PROBE,
    Network,
    Sequential,
    predict,
    read_tensor_file,
)
from hebbian_engine.tensor_core import Rng, Tensor

RECORD_COLUMNS = [
    "run_id",
    "seed",
    "regime",
    "method",
    "probe",
    "epoch",
    "train_acc",
    "val_acc",
    "loss",
    "lr",
]


@dataclass
class RegimeData:
    """Labeled training subset plus the validation set of one regime."""

    train_x: Tensor
    train_y: np.ndarray
    val_x: Tensor
    val_y: np.ndarray

    def __post_init__(self):
        if len(self.train_x) == 0:
            raise ValueError("The labeled training set is empty")
        if len(self.train_x) != len(self.train_y) or len(self.val_x) != len(self.val_y):
            raise ValueError("Images and labels have different lengths")


@dataclass
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 64
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(l2=5e-4))
    dropout: float = 0.5
    top_k: int = 1


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    val_acc: float
    loss: float
    lr: float


@dataclass
class RunRecord:
    run_id: str = ""
    seed: int = 0
    regime: float = 100.0
    method: str = ""
    probe: str = ""
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    test_accuracy: float | None = None

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "run_id": self.run_id,
                "seed": self.seed,
                "regime": self.regime,
                "method": self.method,
                "probe": self.probe,
                **asdict(record),
            }
            for record in self.epochs
        ]
        return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def early_stop_select(records: list[EpochRecord]) -> int:
    """Epoch with the highest validation accuracy; the earliest one on ties."""
    if not records:
        raise ValueError("No epoch records to select from")
    best = max(range(len(records)), key=lambda i: (records[i].val_acc, -i))
    return records[best].epoch


def topk_accuracy(logits: Tensor, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of samples whose label is among the k largest logits (ties by index)."""
    if len(labels) == 0:
        return float("nan")
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == np.asarray(labels)[:, None], axis=1)))


def iterate_minibatches(n: int, batch_size: int, rng: Rng | None, min_size: int = 1):
    """Yield index arrays covering a (shuffled) permutation of range(n)."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        batch = order[start : start + batch_size]
        if len(batch) >= min_size:
            yield batch


def _fit(
    model: Sequential,
    train_x: Tensor,
    train_y: np.ndarray,
    val_x: Tensor,
    val_y: np.ndarray,
    config: TrainingConfig,
    rng: Rng,
    record: RunRecord,
    evaluate,
    min_batch: int = 1,
) -> RunRecord:
    velocity: dict[str, Tensor] = {}
    best_state, best_val = None, -np.inf
    for epoch in tqdm(range(config.epochs), desc=f"{record.method} {record.probe}", leave=False):
        losses = []
        batches = iterate_minibatches(
            len(train_x), config.batch_size, rng.spawn("shuffle", epoch), min_batch
        )
        for step, batch in enumerate(batches):
            tape = Tape()
            logits = model.forward(
                train_x[batch],
                training=True,
                rng=rng.spawn("dropout", epoch, step),
                tape=tape,
            )
            loss, dlogits = cross_entropy(logits, train_y[batch])
            _, grads = tape.backward(dlogits)
            params, velocity = sgd_step(model.parameters(), grads, velocity, config.sgd, epoch)
            model.set_parameters(params)
            losses.append(loss)

        epoch_record = EpochRecord(
            epoch=epoch,
            train_acc=topk_accuracy(evaluate(train_x), train_y, config.top_k),
            val_acc=topk_accuracy(evaluate(val_x), val_y, config.top_k),
            loss=float(np.mean(losses)) if losses else float("nan"),
            lr=config.sgd.lr(epoch),
        )
        record.epochs.append(epoch_record)
        if epoch_record.val_acc > best_val:
            best_val = epoch_record.val_acc
            best_state = copy.deepcopy(model.state_dict())

    if record.epochs:
        record.best_epoch = early_stop_select(record.epochs)
    if best_state is not None:
        model.set_parameters(best_state)
    return record


def build_classifier(in_features: int, num_classes: int, dropout: float, rng: Rng) -> Sequential:
    return Sequential([Dropout(dropout), Dense(in_features, num_classes, rng.spawn("init"))])


def train_classifier(
    extractor: Network | None,
    probe: str,
    data: RegimeData,
    config: TrainingConfig,
    rng: Rng,
    num_classes: int | None = None,
    record: RunRecord | None = None,
) -> tuple[Sequential, RunRecord]:
    """
    Train dropout + linear classifier on frozen features of `probe`.

    The extractor runs in eval mode without a tape, so no gradient reaches it.
    For probe `Final` the features are the L5 output and the trained weights
    are installed as the extractor's own classifier. With extractor=None the
    inputs are used as features directly.
    """
    record = record or RunRecord(probe=probe)
    if extractor is not None:
        num_classes = extractor.spec.num_classes
        feature_probe = "L5" if probe == FINAL_PROBE else probe
        stop = extractor.spec.probe_index(feature_probe)
        train_f = predict(extractor, data.train_x, stop=stop)
        val_f = predict(extractor, data.val_x, stop=stop)
    else:
        train_f = data.train_x.reshape(len(data.train_x), -1)
        val_f = data.val_x.reshape(len(data.val_x), -1)
    if num_classes is None:
        raise ValueError("num_classes is required when no extractor is given")

    classifier = build_classifier(train_f.shape[1], num_classes, config.dropout, rng)
    _fit(
        classifier,
        train_f,
        data.train_y,
        val_f,
        data.val_y,
        config,
        rng,
        record,
        evaluate=lambda f: predict(classifier, f),
    )
    if extractor is not None and probe == FINAL_PROBE:
        install_classifier(extractor, classifier)
    return classifier, record


def install_classifier(network: Network, classifier: Sequential) -> None:
    """Copy a trained dropout + fc classifier into the network's final layers."""
    last = len(network.layers) - 1
    dense = classifier.layers[-1]
    network.set_parameters({f"layers.{last}.{k}": v for k, v in dense.params.items()})


def classify_with_probe(
    extractor: Network, probe: str, classifier: Sequential, images: Tensor
) -> Tensor:
    """Logits of a probe classifier applied on top of the extractor."""
    if probe == FINAL_PROBE:
        return predict(extractor, images)
    features = predict(extractor, images, stop=extractor.spec.probe_index(probe))
    return predict(classifier, features)


def reestimate_bn_statistics(network: Network, images: Tensor, batch_size: int) -> None:
    """
    Reset every BatchNorm's running statistics and recompute them as a
    cumulative average over one pass of `images`.
    """
    bn_layers = [layer for layer in network.layers if isinstance(layer, BatchNorm)]
    saved = [layer.momentum for layer in bn_layers]
    for layer in bn_layers:
        layer.reset_running_stats()
        layer.momentum = None
    stop = network.spec.probe_index("L5")
    for batch in iterate_minibatches(len(images), batch_size, None, min_size=2):
        network.forward(images[batch], training=True, stop=stop)
    for layer, momentum in zip(bn_layers, saved):
        layer.momentum = momentum


def train_end_to_end(
    network: Network,
    data: RegimeData,
    config: TrainingConfig,
    rng: Rng,
    checkpoint: str | Path | None = None,
    pretrained: bool = False,
    record: RunRecord | None = None,
) -> tuple[Network, RunRecord]:
    """
    Backprop through every layer on labeled data only.

    Scratch (no checkpoint, pretrained=False) is the BP baseline. With a
    checkpoint (or pretrained=True when the network already holds Hebbian
    weights) BatchNorm switches to standard mode and its statistics are
    re-estimated before fine-tuning. Zero epochs leave the network untouched.
    """
    record = record or RunRecord(probe=FINAL_PROBE)
    if checkpoint is not None:
        header, tensors = read_tensor_file(checkpoint)
        if header != network.spec.to_text():
            raise ValueError(f"Checkpoint {checkpoint} does not match the network spec")
        network.load_state_dict(tensors)
        pretrained = True
    if config.epochs == 0:
        return network, record

    network.set_bn_mode(hebbian_phase=False)
    if pretrained:
        reestimate_bn_statistics(network, data.train_x, config.batch_size)

    _fit(
        network,
        data.train_x,
        data.train_y,
        data.val_x,
        data.val_y,
        config,
        rng,
        record,
        evaluate=lambda x: predict(network, x),
        min_batch=2,
    )
    return network, record
