"""
Run orchestration: Hebbian pre-training, probe evaluation for the three
methods (BP, HPCA, HPCA_FT) and the multi-seed sweep that writes

    <output_dir>/manifest.json
    <output_dir>/records.csv      per-epoch training records
    <output_dir>/results.csv      test accuracy per (seed, regime, method, probe)
    <output_dir>/table.csv, table.txt, plots/
    <output_dir>/checkpoints/hpca_seed<S>.ckpt
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from prefect import flow, task
from prefect.task_runners import ThreadPoolTaskRunner
from tqdm import tqdm

from experiment_control import results as res
from experiment_control import util
from experiment_control.config import ExperimentConfig, load_config
from experiment_control.datasets import (
    Dataset,
    RegimeSplit,
    dataset_fingerprint,
    downsample,
    load_cifar10,
    load_cifar100,
    make_split,
    subset,
    synth_image_dataset,
)
from hebbian_engine.hebbian import (
    HebbianLayerState,
    center_inputs,
    conv_hebbian_step,
    hebbian_step,
    representation_error,
)
from hebbian_engine.layers import Conv2D, Dense, Layer
from hebbian_engine.network import (
    FINAL_PROBE,
    Network,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from hebbian_engine.tensor_core import Rng, im2col
from hebbian_engine.training import (
    RegimeData,
    RunRecord,
    classify_with_probe,
    iterate_minibatches,
    topk_accuracy,
    train_classifier,
    train_end_to_end,
)

# rows of a conv layer's patch matrix used for the representation error trace
ERROR_SAMPLE_ROWS = 4096


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(training pool incl. validation, test set) after limits and resizing."""
    if config.dataset == "synthetic":
        shape = (3, config.image_size, config.image_size)
        train = synth_image_dataset(config.synthetic_samples, 10, shape, name="synthetic-train")
        test = synth_image_dataset(
            max(config.synthetic_samples // 4, 10), 10, shape, name="synthetic-test"
        )
    else:
        loader = load_cifar10 if config.dataset == "cifar10" else load_cifar100
        train = loader(config.data_dir, "train")
        test = loader(config.data_dir, "test")
    if config.train_limit:
        train = subset(train, np.arange(min(config.train_limit, len(train))))
    if config.test_limit:
        test = subset(test, np.arange(min(config.test_limit, len(test))))
    return downsample(train, config.image_size), downsample(test, config.image_size)


def regime_data(dataset: Dataset, split: RegimeSplit) -> RegimeData:
    return RegimeData(
        dataset.images[split.labeled_idx],
        dataset.labels[split.labeled_idx],
        dataset.images[split.val_idx],
        dataset.labels[split.val_idx],
    )


def build_network(config: ExperimentConfig, seed: int) -> Network:
    return Network(
        config.network_spec(),
        Rng(seed).spawn("network"),
        bn_momentum=config.bn_momentum,
        bn_epsilon=config.bn_epsilon,
    )


def probe_rng(seed: int, regime: float, probe: str) -> Rng:
    """Classifier stream for a probe; shared by every method."""
    return Rng(seed).spawn("probe", f"{regime:g}", probe)


class HebbianTrainer:
    """
    Hebbian state for every conv / fc layer of blocks L1..L5, updated from a
    forward-pass hook so each layer learns from the current output of the
    layers below it.
    """

    def __init__(self, network: Network, config: ExperimentConfig):
        self.network = network
        self.rule = config.hebbian_rule_spec()
        last = network.spec.probe_index("L5")
        self.block_of: dict[int, str] = {}
        self.states: dict[int, HebbianLayerState] = {}
        for index, layer in enumerate(network.layers[: last + 1]):
            if not isinstance(layer, (Conv2D, Dense)):
                continue
            weight = layer.params["weight"]
            self.states[index] = HebbianLayerState(
                weights=weight.reshape(weight.shape[0], -1),
                running_input_mean=np.zeros(int(np.prod(weight.shape[1:]))),
                mean_momentum=config.mean_momentum,
                learning_rate=config.hebbian_lr,
            )
            probe_points = network.spec.probe_points
            self.block_of[index] = probe_points[min(i for i in probe_points if i >= index)]
            self._sync(index)
        self._errors: dict[int, list[float]] = {i: [] for i in self.states}

    @property
    def layer_indices(self) -> list[int]:
        return sorted(self.states)

    def hook(self, active):
        active = set(active)

        def update(index: int, layer: Layer, x):
            if index in active:
                self._update(index, layer, x)

        return update

    def _update(self, index: int, layer: Layer, x) -> None:
        state = self.states[index]
        if isinstance(layer, Conv2D):
            inputs = im2col(x, layer.kernel, layer.stride, layer.pad)
            sample = inputs.reshape(-1, state.input_dim)[:ERROR_SAMPLE_ROWS]
            self._errors[index].append(self._error(state, sample))
            conv_hebbian_step(state, inputs, self.rule)
        else:
            self._errors[index].append(self._error(state, x))
            hebbian_step(state, x, self.rule)
        self._sync(index)

    def _error(self, state: HebbianLayerState, X) -> float:
        return representation_error(state, center_inputs(state, X, training=False), self.rule)

    def _sync(self, index: int) -> None:
        """Write weights back and fold the input centering into the bias."""
        layer = self.network.layers[index]
        state = self.states[index]
        layer.params["weight"] = state.weights.reshape(layer.params["weight"].shape)
        layer.params["bias"] = -state.weights @ state.running_input_mean

    def pop_epoch_errors(self, indices) -> dict[str, float]:
        errors = {}
        for index in indices:
            values = self._errors[index]
            errors[self.block_of[index]] = float(np.mean(values)) if values else float("nan")
            self._errors[index] = []
        return errors

    def input_means(self) -> dict:
        return {
            f"hebbian.{index}.running_input_mean": state.running_input_mean
            for index, state in self.states.items()
        }


@dataclass
class PretrainResult:
    checkpoint: Path
    error_trace: dict[str, list[float]] = field(default_factory=dict)


@task(name="HPCA pre-training")
def run_hpca_pretrain(
    config: ExperimentConfig,
    seed: int,
    dataset: Dataset,
    train_idx,
    out_path: str | Path,
) -> PretrainResult:
    """
    Unsupervised pre-training of L1..L5 on every training image (labeled and
    unlabeled alike; labels are never read), then save the checkpoint.

    All layers learn simultaneously in each forward pass unless
    config.layerwise, in which case each layer gets the full epoch budget in
    turn, bottom-up, on the outputs of the already trained layers below.
    """
    network = build_network(config, seed)
    network.set_bn_mode(hebbian_phase=True)
    trainer = HebbianTrainer(network, config)
    images = dataset.images[np.asarray(train_idx, dtype=np.int64)]
    rng = Rng(seed).spawn("hebbian")

    if config.layerwise:
        phases = [[index] for index in trainer.layer_indices]
    else:
        phases = [trainer.layer_indices]
    trace: dict[str, list[float]] = {trainer.block_of[i]: [] for i in trainer.layer_indices}

    for phase, active in enumerate(phases):
        stop = max(active)
        hook = trainer.hook(active)
        for epoch in tqdm(range(config.hebbian_epochs), desc=f"Hebbian phase {phase}", leave=False):
            batches = iterate_minibatches(
                len(images), config.batch_size, rng.spawn(phase, epoch), min_size=2
            )
            for batch in batches:
                network.forward(images[batch], training=True, stop=stop, hook=hook)
            errors = trainer.pop_epoch_errors(active)
            for name, value in errors.items():
                trace[name].append(value)
            summary = ", ".join(f"{name} {value:.4f}" for name, value in errors.items())
            print(f"Seed {seed} Hebbian epoch {epoch}: representation error {summary}")

    network.extra_tensors = trainer.input_means()
    checkpoint = save_checkpoint(out_path, network)
    print(f"Saved Hebbian checkpoint to {checkpoint}")
    return PretrainResult(checkpoint, trace)


def _load_pretrained(config: ExperimentConfig, checkpoint: str | Path | None) -> Network:
    if checkpoint is None or not Path(checkpoint).is_file():
        raise FileNotFoundError(f"HPCA methods need a pre-training checkpoint, not found: {checkpoint}")
    network = load_checkpoint(
        checkpoint,
        expected_spec=config.network_spec(),
        bn_momentum=config.bn_momentum,
        bn_epsilon=config.bn_epsilon,
    )
    network.set_bn_mode(hebbian_phase=True)
    return network


def _record(method: str, regime: float, seed: int, probe: str) -> RunRecord:
    return RunRecord(util.run_id(method, regime, seed, probe), seed, regime, method, probe)


def prepare_network(
    method: str,
    config: ExperimentConfig,
    seed: int,
    regime: float,
    data: RegimeData,
    checkpoint: str | Path | None = None,
) -> tuple[Network, RunRecord | None]:
    """
    The trained network a method's probes are read from, plus the record of
    its end-to-end training (None for HPCA, whose layers stay frozen).
    """
    if method == "BP":
        network = build_network(config, seed)
        return train_end_to_end(
            network,
            data,
            config.end_to_end_training(),
            Rng(seed).spawn("end-to-end", f"{regime:g}"),
            record=_record(method, regime, seed, FINAL_PROBE),
        )

    network = _load_pretrained(config, checkpoint)
    if method == "HPCA":
        return network, None

    # HPCA_FT: classifier on the frozen Hebbian features first, then fine-tune everything
    _, record = train_classifier(
        network,
        FINAL_PROBE,
        data,
        config.classifier_training(),
        probe_rng(seed, regime, FINAL_PROBE),
        record=_record(method, regime, seed, FINAL_PROBE),
    )
    _, finetune = train_end_to_end(
        network,
        data,
        config.end_to_end_training(config.finetune_epochs),
        Rng(seed).spawn("fine-tune", f"{regime:g}"),
        pretrained=True,
    )
    offset = len(record.epochs)
    for epoch_record in finetune.epochs:
        epoch_record.epoch += offset
        record.epochs.append(epoch_record)
    if finetune.best_epoch is not None:
        record.best_epoch = finetune.best_epoch + offset
    return network, record


def evaluate_probe(
    network: Network,
    method: str,
    probe: str,
    config: ExperimentConfig,
    seed: int,
    regime: float,
    data: RegimeData,
    test: Dataset,
    end_to_end_record: RunRecord | None = None,
) -> RunRecord:
    """Test accuracy of one probe at its early-stopped epoch."""
    if probe == FINAL_PROBE and end_to_end_record is not None:
        record = end_to_end_record
        logits = predict(network, test.images)
    else:
        classifier, record = train_classifier(
            network,
            probe,
            data,
            config.classifier_training(),
            probe_rng(seed, regime, probe),
            record=_record(method, regime, seed, probe),
        )
        logits = classify_with_probe(network, probe, classifier, test.images)
    record.test_accuracy = topk_accuracy(logits, test.labels, config.resolved_top_k)
    print(
        f"{record.run_id}: top-{config.resolved_top_k} test accuracy "
        f"{100 * record.test_accuracy:.2f}% (best epoch {record.best_epoch})"
    )
    return record


@task(name="Evaluate sweep cell")
def run_cell(
    config: ExperimentConfig,
    seed: int,
    regime: float,
    method: str,
    dataset: Dataset,
    test: Dataset,
    split: RegimeSplit,
    checkpoint: str | Path | None = None,
) -> list[RunRecord]:
    """All probes of one (seed, regime, method) cell, sharing one trained network."""
    data = regime_data(dataset, split)
    network, end_to_end_record = prepare_network(method, config, seed, regime, data, checkpoint)
    return [
        evaluate_probe(network, method, probe, config, seed, regime, data, test, end_to_end_record)
        for probe in config.probes
    ]


def run_probe_eval(
    config: ExperimentConfig,
    method: str,
    probe: str,
    regime: float,
    seed: int,
    checkpoint: str | Path | None = None,
    data: tuple[Dataset, Dataset] | None = None,
) -> RunRecord:
    """Train and test a single probe of a single method."""
    dataset, test = data if data is not None else load_data(config)
    split = make_split(dataset, config.val_fraction, regime, seed)
    records = run_cell.fn(
        config.replace(probes=[probe]), seed, regime, method, dataset, test, split, checkpoint
    )
    return records[0]


def check_nested(splits: dict[float, RegimeSplit]) -> bool:
    regimes = sorted(splits)
    return all(
        set(splits[small].labeled_idx) <= set(splits[large].labeled_idx)
        for small, large in zip(regimes, regimes[1:])
    )


def build_manifest(
    config: ExperimentConfig,
    dataset: Dataset,
    test: Dataset,
    splits: dict[int, dict[float, RegimeSplit]],
) -> dict:
    return {
        "config": config.to_dict(),
        "overrides": config.overrides(),
        "train_fingerprint": dataset_fingerprint(dataset),
        "test_fingerprint": dataset_fingerprint(test),
        "top_k": config.resolved_top_k,
        "splits": {
            str(seed): {
                "labeled_sizes": {f"{r:g}": len(s.labeled_idx) for r, s in per_seed.items()},
                "val_size": len(next(iter(per_seed.values())).val_idx),
                "nested": check_nested(per_seed),
            }
            for seed, per_seed in splits.items()
        },
    }


def run_sweep(
    config: ExperimentConfig,
    data: tuple[Dataset, Dataset] | None = None,
    parallel: bool = False,
) -> pd.DataFrame:
    """
    Every (seed, regime, method) cell of the config, then the aggregated table.
    With parallel=True (inside a flow) cells are submitted as Prefect tasks.
    """
    out_dir = util.make_directory(config.output_dir)
    dataset, test = data if data is not None else load_data(config)
    print(f"Training pool: {len(dataset)} images, test: {len(test)} images ({config.dataset})")

    splits = {
        seed: {r: make_split(dataset, config.val_fraction, r, seed) for r in config.regimes}
        for seed in config.seeds
    }
    manifest = build_manifest(config, dataset, test, splits)
    broken = [seed for seed, entry in manifest["splits"].items() if not entry["nested"]]
    if broken:
        raise RuntimeError(f"Labeled subsets are not nested across regimes for seeds {broken}")
    util.write_json(out_dir / "manifest.json", manifest)

    checkpoints = {}
    if any(m in ("HPCA", "HPCA_FT") for m in config.methods):
        for seed in config.seeds:
            path = out_dir / "checkpoints" / util.checkpoint_name(seed)
            if path.is_file():
                print(f"Reusing Hebbian checkpoint {path}")
            else:
                train_idx = next(iter(splits[seed].values())).train_idx
                run_hpca_pretrain.fn(config, seed, dataset, train_idx, path)
            checkpoints[seed] = path

    cells = [
        (seed, regime, method)
        for seed in config.seeds
        for regime in config.regimes
        for method in config.methods
    ]
    args = [
        (config, seed, regime, method, dataset, test, splits[seed][regime], checkpoints.get(seed))
        for seed, regime, method in cells
    ]
    if parallel:
        futures = [run_cell.submit(*a) for a in args]
        cell_records = [f.result() for f in futures]
    else:
        cell_records = [run_cell.fn(*a) for a in args]
    records = [record for cell in cell_records for record in cell]

    return res.write_sweep_outputs(out_dir, records, config.resolved_top_k)


@flow(name="hebbseed_pretrain", log_prints=True)
def pretrain_flow(config_paths: list[str], seed: int, out: str) -> str:
    config = load_config(*config_paths)
    dataset, _ = load_data(config)
    split = make_split(dataset, config.val_fraction, max(config.regimes), seed)
    result = run_hpca_pretrain(config, seed, dataset, split.train_idx, out)
    return str(result.checkpoint)


@flow(name="hebbseed_train", log_prints=True)
def train_flow(
    config_paths: list[str],
    method: str,
    probe: str,
    regime: float,
    seed: int,
    checkpoint: str | None = None,
) -> float:
    config = load_config(*config_paths)
    record = run_probe_eval(config, method, probe, regime, seed, checkpoint)
    return record.test_accuracy


@flow(name="hebbseed_sweep", log_prints=True)
def sweep_flow(config_paths: list[str]) -> None:
    config = load_config(*config_paths)
    try:
        run_sweep(config, parallel=config.workers > 1)
    except Exception as e:
        print(f"Sweep failed: {e}")
        raise


def run_sweep_flow(config_paths: list[str]) -> None:
    config = load_config(*config_paths)
    sweep_flow.with_options(task_runner=ThreadPoolTaskRunner(max_workers=config.workers))(
        config_paths
    )
