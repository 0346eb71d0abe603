"""
Test experiment_control: results.py
"""

import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from experiment_control import util
from experiment_control.results import (
    RESULT_COLUMNS,
    ResultRow,
    ResultTable,
    aggregate,
    check_desk_ordering,
    check_manifests,
    ci_half_width,
    report,
    results_frame,
    to_text_table,
    write_sweep_outputs,
)
from hebbian_engine.training import EpochRecord, RunRecord
from hebbian_engine.unit_tests._engine_base_test import _EngineBaseTest


def make_records(seeds, accuracy=lambda seed, regime, method: 0.5):
    records = []
    for seed in seeds:
        for regime in (1.0, 100.0):
            for method in ("HPCA", "BP"):
                for probe in ("Final", "L2"):
                    acc = accuracy(seed, regime, method)
                    records.append(
                        RunRecord(
                            util.run_id(method, regime, seed, probe),
                            seed,
                            regime,
                            method,
                            probe,
                            [EpochRecord(0, acc, acc, 1.0, 1e-3)],
                            0,
                            acc,
                        )
                    )
    return records


def manifest(seeds, **config_changes):
    return {
        "config": {"seeds": seeds, "output_dir": "runs", "epochs": 20, **config_changes},
        "train_fingerprint": "abc",
        "test_fingerprint": "def",
        "top_k": 1,
    }


class ConfidenceIntervalTest(_EngineBaseTest):
    def test_five_values(self):
        assert abs(ci_half_width([1, 2, 3, 4, 5]) - 1.9632) < 1e-3

    def test_identical_values(self):
        assert ci_half_width([0.7, 0.7, 0.7]) < 1e-12

    def test_single_value(self):
        assert ci_half_width([0.7]) is None


class AggregateTest(_EngineBaseTest):
    def test_mean_and_interval(self):
        records = make_records([0, 1, 2], accuracy=lambda seed, regime, method: 0.1 * (seed + 1))
        table = aggregate(results_frame(records), top_k=1)
        assert len(table.rows) == 2 * 2 * 2
        row = table.cell(1.0, "BP", "L2")
        assert abs(row.mean - 0.2) < 1e-12
        assert abs(row.ci_half_width - ci_half_width([0.1, 0.2, 0.3])) < 1e-12
        assert row.n_seeds == 3
        # methods and probes in presentation order
        assert [r.method for r in table.rows[:4]] == ["BP", "BP", "HPCA", "HPCA"]
        assert [r.probe for r in table.rows[:2]] == ["L2", "Final"]

    def test_single_seed(self):
        table = aggregate(results_frame(make_records([0])))
        assert all(row.ci_half_width is None for row in table.rows)

    def test_empty(self):
        with self.assertRaises(ValueError):
            aggregate(results_frame([]))

    def test_text_table(self):
        table = aggregate(results_frame(make_records([0, 1])))
        text = to_text_table(table)
        assert text.colnames == ["regime", "BP L2", "BP Final", "HPCA L2", "HPCA Final"]
        assert list(text["regime"]) == ["1%", "100%"]
        assert text["BP L2"][0] == "50.00 +/- 0.00"

    def test_sweep_outputs(self):
        with tempfile.TemporaryDirectory() as tmp:
            frame = write_sweep_outputs(tmp, make_records([0, 1]), top_k=1)
            out = Path(tmp)
            assert len(pd.read_csv(out / "records.csv")) == 16
            assert len(pd.read_csv(out / "results.csv")) == 16
            assert (out / "table.txt").read_text().startswith("# top-1 test accuracy")
            assert len(list((out / "plots").glob("*.png"))) == 2
            assert len(frame) == 8


class ReportTest(_EngineBaseTest):
    def write_run(self, directory, seeds, **config_changes):
        directory = util.make_directory(directory)
        util.write_json(directory / "manifest.json", manifest(seeds, **config_changes))
        results_frame(make_records(seeds, lambda seed, r, m: 0.25 * (seed + 1))).to_csv(
            directory / "results.csv", index=False
        )
        return directory

    def test_manifests_must_agree(self):
        check_manifests([manifest([0]), manifest([1, 2], output_dir="elsewhere")])
        with self.assertRaises(ValueError):
            check_manifests([manifest([0]), manifest([1], epochs=5)])
        other_data = manifest([1])
        other_data["train_fingerprint"] = "xyz"
        with self.assertRaises(ValueError):
            check_manifests([manifest([0]), other_data])

    def test_report_combines_runs(self):
        with tempfile.TemporaryDirectory() as tmp:
            a = self.write_run(Path(tmp) / "a", [0])
            b = self.write_run(Path(tmp) / "b", [1, 0])
            table = report([a, b], Path(tmp) / "combined")
            row = table.cell(100.0, "HPCA", "Final")
            # the repeated seed 0 is counted once
            assert row.n_seeds == 2
            assert np.isclose(row.mean, 0.375)
            assert (Path(tmp) / "combined" / "table.txt").is_file()

    def test_report_refuses_inconsistent_runs(self):
        with tempfile.TemporaryDirectory() as tmp:
            a = self.write_run(Path(tmp) / "a", [0])
            b = self.write_run(Path(tmp) / "b", [1], epochs=5)
            with self.assertRaises(ValueError):
                report([a, b])


REPO_ROOT = Path(__file__).resolve().parents[2]
DESK_RUN = REPO_ROOT / "runs" / "desk"


def desk_table(hpca_l3=0.30, bp_l3=0.25, hpca_final=0.40, ft_final=0.42):
    cells = [
        (1.0, "BP", "L3", bp_l3),
        (1.0, "HPCA", "L3", hpca_l3),
        (5.0, "HPCA", "Final", hpca_final),
        (5.0, "HPCA_FT", "Final", ft_final),
    ]
    return ResultTable([ResultRow(r, m, p, acc, 0.01, 3, 1) for r, m, p, acc in cells])


class AcceptanceTest(_EngineBaseTest):
    def test_orderings_hold(self):
        checks = check_desk_ordering(desk_table())
        assert [check.passed for check in checks] == [True, True], checks

    def test_bp_ahead_fails(self):
        checks = check_desk_ordering(desk_table(hpca_l3=0.20, bp_l3=0.25))
        assert [check.passed for check in checks] == [False, True]

    def test_near_chance_fails(self):
        # ahead of BP but under 1.5 x 10%
        checks = check_desk_ordering(desk_table(hpca_l3=0.14, bp_l3=0.12))
        assert not checks[0].passed
        assert check_desk_ordering(desk_table(hpca_l3=0.14, bp_l3=0.12), num_classes=100)[0].passed

    def test_finetune_tolerance(self):
        assert check_desk_ordering(desk_table(hpca_final=0.40, ft_final=0.396))[1].passed
        assert not check_desk_ordering(desk_table(hpca_final=0.40, ft_final=0.39))[1].passed

    def test_missing_cell_fails(self):
        table = ResultTable(desk_table().rows[:2])
        checks = check_desk_ordering(table)
        assert checks[0].passed
        assert not checks[1].passed
        assert "No result" in checks[1].detail

    def test_report_raises_on_failed_ordering(self):
        with tempfile.TemporaryDirectory() as tmp:
            run = util.make_directory(Path(tmp) / "run")
            util.write_json(run / "manifest.json", manifest([0], dataset="cifar10"))
            frame = desk_table(hpca_l3=0.20).to_frame()
            frame = frame.rename(columns={"mean": "test_acc"})
            frame["seed"] = 0
            frame["run_id"] = "x"
            frame["best_epoch"] = 0
            frame[RESULT_COLUMNS].to_csv(run / "results.csv", index=False)
            with self.assertRaises(ValueError):
                report([run], Path(tmp) / "out", check_acceptance=True)
            # without the flag the same table is only written
            report([run], Path(tmp) / "out")

    @unittest.skipUnless(
        (REPO_ROOT / "data" / "cifar-10-batches-bin").is_dir() and (DESK_RUN / "results.csv").is_file(),
        "needs CIFAR-10 and the output of go_sweep.sh",
    )
    def test_desk_sweep_orderings(self):
        with tempfile.TemporaryDirectory() as tmp:
            table = report([DESK_RUN], tmp)
        checks = check_desk_ordering(table)
        failed = [f"{check.name}: {check.detail}" for check in checks if not check.passed]
        assert not failed, failed
