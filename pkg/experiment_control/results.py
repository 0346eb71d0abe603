"""
Aggregation of per-seed test accuracies into mean and 95% t-interval per
(regime, method, probe), and the CSV / text table / plot outputs.
"""

from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import astropy.table as at
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from prefect import flow
from scipy import stats

from experiment_control import util
from hebbian_engine.network import FINAL_PROBE, PROBE_NAMES
from hebbian_engine.training import RECORD_COLUMNS, RunRecord

RESULT_COLUMNS = ["run_id", "seed", "regime", "method", "probe", "best_epoch", "test_acc"]
METHOD_ORDER = ["BP", "HPCA", "HPCA_FT"]
PROBE_ORDER = [*PROBE_NAMES, FINAL_PROBE]

# manifest config keys allowed to differ between runs that are aggregated together
_RUN_ONLY_KEYS = {"seeds", "output_dir", "workers", "data_dir"}

DATASET_CLASSES = {"cifar10": 10, "cifar100": 100}
CHANCE_MULTIPLE = 1.5
FINETUNE_TOLERANCE = 0.005


@dataclass
class ResultRow:
    regime: float
    method: str
    probe: str
    mean: float
    ci_half_width: float | None
    n_seeds: int
    top_k: int


@dataclass
class ResultTable:
    rows: list[ResultRow]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [asdict(row) for row in self.rows],
            columns=["regime", "method", "probe", "mean", "ci_half_width", "n_seeds", "top_k"],
        )

    def cell(self, regime: float, method: str, probe: str) -> ResultRow:
        for row in self.rows:
            if (row.regime, row.method, row.probe) == (regime, method, probe):
                return row
        raise KeyError(f"No result for regime {regime}, method {method}, probe {probe}")


def ci_half_width(values) -> float | None:
    """t_{0.975, n-1} * s / sqrt(n) with the sample standard deviation s."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        return None
    s = np.std(values, ddof=1)
    return float(stats.t.ppf(0.975, n - 1) * s / np.sqrt(n))


def _order(values, preferred):
    return sorted(values, key=lambda v: (preferred.index(v) if v in preferred else len(preferred), v))


def aggregate(results: pd.DataFrame, top_k: int = 1) -> ResultTable:
    """
    Mean and 95% confidence half-width over seeds for every (regime, method, probe).
    With a single seed the interval is left empty.
    """
    if results.empty:
        raise ValueError("No results to aggregate")
    rows = []
    warned = False
    for regime in sorted(results["regime"].unique()):
        at_regime = results[results["regime"] == regime]
        for method in _order(at_regime["method"].unique(), METHOD_ORDER):
            at_method = at_regime[at_regime["method"] == method]
            for probe in _order(at_method["probe"].unique(), PROBE_ORDER):
                values = at_method.loc[at_method["probe"] == probe, "test_acc"].to_numpy()
                half = ci_half_width(values)
                if half is None and not warned:
                    print("WARNING: fewer than 2 seeds, confidence intervals are omitted")
                    warned = True
                rows.append(
                    ResultRow(float(regime), method, probe, float(np.mean(values)), half, len(values), top_k)
                )
    return ResultTable(rows)


def _format_cell(row: ResultRow) -> str:
    if row.ci_half_width is None:
        return f"{100 * row.mean:.2f}"
    return f"{100 * row.mean:.2f} +/- {100 * row.ci_half_width:.2f}"


def to_text_table(table: ResultTable) -> at.Table:
    """
    Regimes as rows, one column per method and probe, accuracies in percent.
    """
    frame = table.to_frame()
    regimes = sorted(frame["regime"].unique())
    columns = [
        (method, probe)
        for method in _order(frame["method"].unique(), METHOD_ORDER)
        for probe in _order(frame.loc[frame["method"] == method, "probe"].unique(), PROBE_ORDER)
    ]
    text = at.Table()
    text["regime"] = [f"{r:g}%" for r in regimes]
    for method, probe in columns:
        cells = []
        for regime in regimes:
            try:
                cells.append(_format_cell(table.cell(regime, method, probe)))
            except KeyError:
                cells.append("")
        text[f"{method} {probe}"] = cells
    return text


def write_table(table: ResultTable, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    out_dir = util.make_directory(out_dir)
    csv_path = out_dir / "table.csv"
    txt_path = out_dir / "table.txt"
    table.to_frame().to_csv(csv_path, index=False)
    top_k = table.rows[0].top_k if table.rows else 1
    buffer = io.StringIO()
    to_text_table(table).write(buffer, format="ascii.fixed_width")
    with open(txt_path, "w") as f:
        f.write(f"# top-{top_k} test accuracy (%), mean +/- 95% CI half-width\n")
        f.write(buffer.getvalue())
    return csv_path, txt_path


def plot_regime_curves(table: ResultTable, out_dir: str | os.PathLike) -> list[Path]:
    """One figure per probe: accuracy against labeled fraction for every method."""
    out_dir = util.make_directory(out_dir)
    frame = table.to_frame()
    paths = []
    for probe in _order(frame["probe"].unique(), PROBE_ORDER):
        at_probe = frame[frame["probe"] == probe]
        fig, ax = plt.subplots(figsize=(6, 4))
        for method in _order(at_probe["method"].unique(), METHOD_ORDER):
            rows = at_probe[at_probe["method"] == method].sort_values("regime")
            errors = rows["ci_half_width"].fillna(0.0).to_numpy(dtype=float)
            ax.errorbar(
                rows["regime"], 100 * rows["mean"], yerr=100 * errors, marker="o", capsize=3, label=method
            )
        ax.set_xscale("log")
        ax.set_xlabel("Labeled samples (% of training set)")
        ax.set_ylabel(f"Top-{table.rows[0].top_k} test accuracy (%)")
        ax.set_title(f"Probe {probe}")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"accuracy_vs_regime_{probe}.png"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def results_frame(records: list[RunRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "run_id": r.run_id,
                "seed": r.seed,
                "regime": r.regime,
                "method": r.method,
                "probe": r.probe,
                "best_epoch": r.best_epoch,
                "test_acc": r.test_accuracy,
            }
            for r in records
        ],
        columns=RESULT_COLUMNS,
    )


def write_sweep_outputs(out_dir: str | os.PathLike, records: list[RunRecord], top_k: int) -> pd.DataFrame:
    out_dir = util.make_directory(out_dir)
    frames = [r.to_frame() for r in records]
    epochs = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=RECORD_COLUMNS)
    epochs.to_csv(out_dir / "records.csv", index=False)
    results = results_frame(records)
    results.to_csv(out_dir / "results.csv", index=False)
    table = aggregate(results, top_k)
    write_table(table, out_dir)
    plot_regime_curves(table, out_dir / "plots")
    print(f"Wrote records, results and tables to {out_dir}")
    return table.to_frame()

@dataclass
class AcceptanceCheck:
    name: str
    passed: bool
    detail: str


def check_desk_ordering(table: ResultTable, num_classes: int = 10) -> list[AcceptanceCheck]:
    """
    Method orderings a desk-scale sweep is expected to show. With 1% labels
    HPCA beats BP on L3 and stays above CHANCE_MULTIPLE x chance there. With
    5% labels fine-tuning loses at most FINETUNE_TOLERANCE against HPCA on
    the final probe. A missing cell fails its check.
    """
    checks = []
    try:
        hpca, bp = table.cell(1.0, "HPCA", "L3"), table.cell(1.0, "BP", "L3")
        chance = 1.0 / num_classes
        passed = hpca.mean > bp.mean and hpca.mean > CHANCE_MULTIPLE * chance
        detail = f"HPCA {100 * hpca.mean:.2f}% vs BP {100 * bp.mean:.2f}%, chance {100 * chance:.2f}%"
    except KeyError as e:
        passed, detail = False, str(e)
    checks.append(AcceptanceCheck("HPCA > BP at 1% on L3", passed, detail))

    try:
        ft, hpca = table.cell(5.0, "HPCA_FT", FINAL_PROBE), table.cell(5.0, "HPCA", FINAL_PROBE)
        passed = ft.mean >= hpca.mean - FINETUNE_TOLERANCE
        detail = f"HPCA_FT {100 * ft.mean:.2f}% vs HPCA {100 * hpca.mean:.2f}%"
    except KeyError as e:
        passed, detail = False, str(e)
    checks.append(AcceptanceCheck(f"HPCA_FT >= HPCA at 5% on {FINAL_PROBE}", passed, detail))
    return checks



def check_manifests(manifests: list[dict]) -> None:
    """
    Runs can only be aggregated together if they used the same data and the
    same configuration (apart from seeds and where they were written).
    """
    if not manifests:
        raise ValueError("No manifests to compare")

    def comparable(manifest):
        config = {k: v for k, v in manifest["config"].items() if k not in _RUN_ONLY_KEYS}
        return config, manifest["train_fingerprint"], manifest["test_fingerprint"], manifest["top_k"]

    reference = comparable(manifests[0])
    for index, manifest in enumerate(manifests[1:], start=1):
        if comparable(manifest) != reference:
            raise ValueError(f"Run manifest {index} is inconsistent with manifest 0, refusing to aggregate")


def report(
    run_dirs: list[str | os.PathLike],
    out_dir: str | os.PathLike | None = None,
    check_acceptance: bool = False,
) -> ResultTable:
    """
    Aggregate sweep directories into one table. With check_acceptance the
    desk-scale orderings are checked and a failure raises ValueError.
    """
    run_dirs = [Path(d) for d in run_dirs]
    manifests = [util.read_json(d / "manifest.json") for d in run_dirs]
    check_manifests(manifests)
    results = pd.concat([pd.read_csv(d / "results.csv") for d in run_dirs], ignore_index=True)
    duplicated = results.duplicated(subset=["seed", "regime", "method", "probe"])
    if duplicated.any():
        print(f"WARNING: dropping {int(duplicated.sum())} results repeated across run directories")
        results = results[~duplicated]
    table = aggregate(results, manifests[0]["top_k"])
    out_dir = Path(out_dir) if out_dir is not None else run_dirs[0]
    write_table(table, out_dir)
    plot_regime_curves(table, out_dir / "plots")
    if check_acceptance:
        num_classes = DATASET_CLASSES.get(manifests[0]["config"].get("dataset"), 10)
        checks = check_desk_ordering(table, num_classes)
        for check in checks:
            print(f"{'PASS' if check.passed else 'FAIL'} {check.name}: {check.detail}")
        failed = [check.name for check in checks if not check.passed]
        if failed:
            raise ValueError(f"Acceptance checks failed: {', '.join(failed)}")
    return table


@flow(name="hebbseed_report", log_prints=True)
def report_flow(run_dirs: list[str], out_dir: str | None = None, check_acceptance: bool = False) -> None:
    table = report(run_dirs, out_dir, check_acceptance)
    print(to_text_table(table))
