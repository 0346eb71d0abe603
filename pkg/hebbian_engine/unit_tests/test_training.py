"""
Test hebbian_engine: training.py
"""

import tempfile
from pathlib import Path

import numpy as np
import numpy.testing as npt

from hebbian_engine.autodiff_sgd import ConstantThenHalve, SgdConfig
from hebbian_engine.network import Network, default_network_spec, predict, save_checkpoint
from hebbian_engine.tensor_core import Rng
from hebbian_engine.training import (
    RECORD_COLUMNS,
    EpochRecord,
    RegimeData,
    RunRecord,
    TrainingConfig,
    classify_with_probe,
    early_stop_select,
    iterate_minibatches,
    reestimate_bn_statistics,
    topk_accuracy,
    train_classifier,
    train_end_to_end,
)
from hebbian_engine.unit_tests._engine_base_test import _EngineBaseTest


def records(val_accs):
    return [EpochRecord(i, 0.0, v, 1.0, 1e-3) for i, v in enumerate(val_accs)]


class SelectionTest(_EngineBaseTest):
    def test_early_stop_picks_best(self):
        assert early_stop_select(records([0.1, 0.4, 0.3])) == 1

    def test_early_stop_ties_pick_earliest(self):
        assert early_stop_select(records([0.2, 0.5, 0.5, 0.1])) == 1
        assert early_stop_select(records([0.3])) == 0

    def test_early_stop_empty(self):
        with self.assertRaises(ValueError):
            early_stop_select([])

    def test_topk_accuracy(self):
        logits = np.array([[0.1, 0.7, 0.2], [0.5, 0.5, 0.0], [0.0, 0.1, 0.9]])
        labels = np.array([2, 1, 2])
        assert topk_accuracy(logits, labels, 1) == 1 / 3
        assert topk_accuracy(logits, labels, 2) == 1.0
        # tie between classes 0 and 1 goes to the lower index
        assert topk_accuracy(logits[1:2], np.array([0]), 1) == 1.0

    def test_minibatches_cover_all_indices(self):
        batches = list(iterate_minibatches(10, 4, Rng(0)))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(10))
        assert [len(b) for b in iterate_minibatches(9, 4, None, min_size=2)] == [4, 4]

    def test_regime_data_checks(self):
        with self.assertRaises(ValueError):
            RegimeData(np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros((1, 2)), np.zeros(1, dtype=int))
        with self.assertRaises(ValueError):
            RegimeData(np.zeros((2, 2)), np.zeros(3, dtype=int), np.zeros((1, 2)), np.zeros(1, dtype=int))

    def test_record_frame(self):
        record = RunRecord("HPCA-r1-s0-L3", 0, 1.0, "HPCA", "L3", records([0.1, 0.2]))
        frame = record.to_frame()
        assert list(frame.columns) == RECORD_COLUMNS
        assert frame["epoch"].tolist() == [0, 1]
        assert set(frame["run_id"]) == {"HPCA-r1-s0-L3"}


class ClassifierTest(_EngineBaseTest):
    def blobs(self, n):
        labels = np.arange(n) % 2
        centers = np.array([[3.0, 3.0], [-3.0, -3.0]])
        return centers[labels] + self.random(n, 2, scale=0.3), labels

    def test_separable_blobs(self):
        train_x, train_y = self.blobs(200)
        val_x, val_y = self.blobs(50)
        config = TrainingConfig(
            epochs=5, batch_size=16, sgd=SgdConfig(lr0=0.1, l2=0.0), dropout=0.0
        )
        classifier, record = train_classifier(
            None, "L1", RegimeData(train_x, train_y, val_x, val_y), config, Rng(0), num_classes=2
        )
        assert topk_accuracy(predict(classifier, train_x), train_y) == 1.0
        assert len(record.epochs) == 5
        assert record.best_epoch is not None

    def test_same_rng_same_classifier(self):
        train_x, train_y = self.blobs(40)
        data = RegimeData(train_x, train_y, train_x[:10], train_y[:10])
        config = TrainingConfig(epochs=2, batch_size=8)
        a, _ = train_classifier(None, "L1", data, config, Rng(5), num_classes=2)
        b, _ = train_classifier(None, "L1", data, config, Rng(5), num_classes=2)
        npt.assert_array_equal(a.parameters()["layers.1.weight"], b.parameters()["layers.1.weight"])

    def test_needs_num_classes_without_extractor(self):
        train_x, train_y = self.blobs(10)
        with self.assertRaises(ValueError):
            train_classifier(
                None, "L1", RegimeData(train_x, train_y, train_x, train_y), TrainingConfig(epochs=1), Rng(0)
            )


class NetworkTrainingTest(_EngineBaseTest):
    def make_network(self, widths=(4, 4, 4, 4, 8), dropout=0.5, seed=0):
        spec = default_network_spec(widths=widths, input_shape=(3, 8, 8), dropout=dropout)
        return Network(spec, Rng(seed))

    def make_data(self, n=24):
        x = self.random(n, 3, 8, 8)
        y = np.arange(n) % 10
        return RegimeData(x, y, x[: n // 2], y[: n // 2])

    def test_frozen_extractor_is_unchanged(self):
        network = self.make_network()
        before = {k: v.copy() for k, v in network.state_dict().items()}
        data = self.make_data()
        config = TrainingConfig(epochs=2, batch_size=8)

        classifier, _ = train_classifier(network, "L2", data, config, Rng(1))
        for name, value in network.state_dict().items():
            npt.assert_array_equal(value, before[name], err_msg=name)
        logits = classify_with_probe(network, "L2", classifier, data.val_x)
        assert logits.shape == (12, 10)

        train_classifier(network, "Final", data, config, Rng(1))
        changed = {
            name for name, value in network.state_dict().items() if not np.array_equal(value, before[name])
        }
        assert changed == {"layers.19.weight", "layers.19.bias"}

    def overfit_config(self, epochs):
        schedule = ConstantThenHalve(constant_epochs=epochs)
        return TrainingConfig(epochs=epochs, batch_size=64, sgd=SgdConfig(lr0=0.05, l2=0.0, schedule=schedule))

    def test_end_to_end_overfits_one_batch(self):
        network = self.make_network(widths=(32, 32, 32, 32, 128), dropout=0.0)
        _, record = train_end_to_end(network, self.make_data(64), self.overfit_config(201), Rng(2))
        assert record.epochs[-1].loss < 0.01, (
            f"loss {record.epochs[0].loss:.3f} -> {record.epochs[-1].loss:.4f}"
        )

    def test_overfit_loss_falls_in_first_steps(self):
        for seed in (0, 1, 2):
            network = self.make_network(widths=(16, 16, 16, 16, 64), dropout=0.0, seed=seed)
            _, record = train_end_to_end(network, self.make_data(64), self.overfit_config(11), Rng(seed))
            losses = [epoch.loss for epoch in record.epochs]
            assert losses[-1] < losses[0], f"seed {seed}: {losses}"

    def test_zero_epochs_leave_network_untouched(self):
        network = self.make_network()
        before = {k: v.copy() for k, v in network.state_dict().items()}
        _, record = train_end_to_end(network, self.make_data(), TrainingConfig(epochs=0), Rng(0))
        assert record.epochs == []
        for name, value in network.state_dict().items():
            npt.assert_array_equal(value, before[name], err_msg=name)

    def test_checkpoint_must_match(self):
        other = self.make_network(widths=(4, 4, 4, 4, 6))
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / "other.ckpt", other)
            with self.assertRaises(ValueError):
                train_end_to_end(self.make_network(), self.make_data(), TrainingConfig(epochs=1), Rng(0), path)

    def test_reestimate_bn_statistics(self):
        network = self.make_network()
        images = self.random(20, 3, 8, 8) + 2.0
        reestimate_bn_statistics(network, images, batch_size=10)
        bn = network.layers[1]
        assert bn.momentum == 0.1
        assert bn.num_batches_tracked == 2
        conv_out = predict(network, images, stop=0).reshape(20, 4, 8, 8)
        npt.assert_allclose(bn.buffers["running_mean"], conv_out.mean(axis=(0, 2, 3)), atol=1e-12)