"""
Experiment matrix — every method at every target fraction, same seeds.

Output mirrors the comparison figure: rows are methods (No Adapt included),
columns are target fractions, cells are mean ± std target Dice over splits.
Because the claim being checked is "beats the others at small target sizes",
the matrix also keeps every per-seed value and runs a paired sign test of
each method against No Adapt.

Files written to the matrix directory:
    matrix_cells.csv    one row per (method, fraction, seed)
    matrix_table.csv    mean / std / "m ± s" per (method, fraction)
    matrix_pivot.csv    the figure-shaped table
    matrix_plot.csv     numeric mean/std per (method, fraction), ready to plot
    sign_tests.csv      paired comparison vs No Adapt per (method, fraction)
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import binomtest

from engine import settings
from engine.config import DivergenceConfig, DivergenceKind, ExperimentConfig
from engine.errors import UsageError
from sources.dataset import Dataset
from validation.cells import CellJob, run_cells
from warehouse.loader import mean_std_table, write_table
from warehouse.schema import MATRIX_COLUMNS, MATRIX_TABLE_COLUMNS, SIGN_TEST_COLUMNS

logger = logging.getLogger(__name__)

NO_ADAPT = DivergenceConfig(kind=DivergenceKind.NONE, weight=0.0)
DEFAULT_FRACTIONS = (0.03, 0.3, 1.0)


def default_methods(weight: float = 0.01, mmd_sigma: float = 1.0) -> list[DivergenceConfig]:
    return [
        NO_ADAPT,
        DivergenceConfig(kind=DivergenceKind.MMD_C, weight=weight, mmd_constant_sigma=mmd_sigma),
        DivergenceConfig(kind=DivergenceKind.MMD_B, weight=weight),
        DivergenceConfig(kind=DivergenceKind.JSD, weight=weight),
    ]


@dataclass
class MatrixResult:
    cells: pd.DataFrame        # MATRIX_COLUMNS
    table: pd.DataFrame        # MATRIX_TABLE_COLUMNS
    pivot: pd.DataFrame
    sign_tests: pd.DataFrame   # SIGN_TEST_COLUMNS
    out_dir: Path

    def cell_values(self, method: str, fraction: float, column: str = "target_dice") -> np.ndarray:
        rows = self.cells[(self.cells["method"] == method) & (self.cells["target_fraction"] == fraction)]
        return rows.sort_values("seed")[column].to_numpy()


def _fraction_label(fraction: float) -> str:
    return f"{fraction:g}"


def sign_test(values: pd.DataFrame, method: str, baseline: str, fraction: float) -> dict:
    """Paired by seed: how often `method` beats `baseline` on target Dice."""
    at = values[values["target_fraction"] == fraction]
    a = at[at["method"] == method].set_index("seed")["target_dice"]
    b = at[at["method"] == baseline].set_index("seed")["target_dice"]
    diff = (a - b.reindex(a.index)).dropna()
    wins, losses = int((diff > 0).sum()), int((diff < 0).sum())
    ties = int((diff == 0).sum())
    p_value = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return {
        "method": method, "baseline": baseline, "target_fraction": fraction,
        "mean_diff": float(diff.mean()) if len(diff) else float("nan"),
        "wins": wins, "losses": losses, "ties": ties, "p_value": float(p_value),
    }


def run_matrix(methods: list[DivergenceConfig], fractions: list[float], base: ExperimentConfig,
               source: Dataset, target: Dataset, out_dir: str | Path | None = None,
               workers: int = 1, progress: bool = False) -> MatrixResult:
    if not methods or not fractions:
        raise UsageError("the matrix needs at least one method and one target fraction")
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise UsageError(f"duplicate methods in matrix: {labels}")
    out_dir = Path(out_dir) if out_dir else settings.runs_dir() / "matrix"

    jobs = []
    for method in methods:
        for fraction in fractions:
            config = base.with_changes(divergence=method.model_dump(), target_fraction=fraction)
            run_dir = out_dir / "cells" / f"{method.label.lower().replace(' ', '-')}_{_fraction_label(fraction)}"
            jobs.append(CellJob((method.label, fraction), config, run_dir))
    logger.info(f"[MATRIX] {len(methods)} methods × {len(fractions)} fractions = {len(jobs)} cells")

    results = run_cells(jobs, source, target, workers=workers, progress=progress)
    cells = pd.DataFrame(
        [{"method": job.key[0], "target_fraction": job.key[1], **row}
         for job, rows in zip(jobs, results) for row in rows],
        columns=MATRIX_COLUMNS,
    )
    table = mean_std_table(cells, ["method", "target_fraction"], "target_dice")
    pivot = table.pivot(index="method", columns="target_fraction", values="cell").reindex(labels)
    pivot.columns = [_fraction_label(f) for f in pivot.columns]
    pivot = pivot.reset_index()

    baseline = NO_ADAPT.label
    tests = pd.DataFrame(
        [sign_test(cells, label, baseline, f) for label in labels if label != baseline for f in fractions]
        if baseline in labels else [],
        columns=SIGN_TEST_COLUMNS,
    )

    write_table(cells, out_dir / "matrix_cells.csv", MATRIX_COLUMNS)
    write_table(table, out_dir / "matrix_table.csv", MATRIX_TABLE_COLUMNS)
    write_table(pivot, out_dir / "matrix_pivot.csv", list(pivot.columns))
    write_table(table, out_dir / "matrix_plot.csv", ["method", "target_fraction", "mean", "std"])
    write_table(tests, out_dir / "sign_tests.csv", SIGN_TEST_COLUMNS)
    logger.info(f"[MATRIX] tables written to {out_dir}")
    return MatrixResult(cells, table, pivot, tests, out_dir)
