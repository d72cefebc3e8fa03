"""
Ablation sweeps: one knob of the method varied, everything else fixed.

Axes and their standard grids:
    feature-space    every tap of the network (ENC1 … DEEPEST … DEC1)
    bw-frequency     bandwidth/KDE refresh every {1, 5, 25, 125} epochs
    kde-samples      KDE bank size {10, 20, 80}
    target-fraction  {0.03, 0.3, 1.0} of the target set
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from engine import settings
from engine.config import ExperimentConfig
from engine.errors import UsageError
from sources.dataset import Dataset
from validation.cells import CellJob, run_cells
from warehouse.loader import mean_std_table, write_table
from warehouse.schema import ABLATION_COLUMNS, ABLATION_TABLE_COLUMNS

logger = logging.getLogger(__name__)

AXES = ("feature-space", "bw-frequency", "kde-samples", "target-fraction")

STANDARD_VALUES = {
    "bw-frequency": [1, 5, 25, 125],
    "kde-samples": [10, 20, 80],
    "target-fraction": [0.03, 0.3, 1.0],
}

_FIELD = {
    "feature-space": "tap_name",
    "bw-frequency": "bw_refresh_epochs",
    "kde-samples": "kde_samples",
    "target-fraction": "target_fraction",
}


@dataclass
class AblationGrid:
    axis: str
    values: list
    base: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise UsageError(f"unknown ablation axis '{self.axis}' (have: {', '.join(AXES)})")
        if not self.values:
            raise UsageError("an ablation grid needs at least one value")
        for value in self.values:
            self._check(value)

    def _check(self, value):
        if self.axis == "feature-space":
            if value not in self.base.unet.tap_names():
                raise UsageError(f"tap '{value}' doesn't exist at depth {self.base.unet.depth}")
        elif self.axis == "target-fraction":
            if not 0.0 < float(value) <= 1.0:
                raise UsageError(f"target fraction {value} not in (0, 1]")
        elif self.axis == "kde-samples":
            if int(value) != value or value < 2:
                raise UsageError(f"KDE sample count must be an integer ≥ 2, got {value}")
        elif int(value) != value or value < 1:
            raise UsageError(f"refresh frequency must be a positive integer, got {value}")

    def config_for(self, value) -> ExperimentConfig:
        return self.base.with_changes(**{_FIELD[self.axis]: value})


def standard_grid(axis: str, base: ExperimentConfig) -> AblationGrid:
    if axis == "feature-space":
        return AblationGrid(axis, base.unet.tap_names(), base)
    if axis not in STANDARD_VALUES:
        raise UsageError(f"unknown ablation axis '{axis}' (have: {', '.join(AXES)})")
    return AblationGrid(axis, list(STANDARD_VALUES[axis]), base)


@dataclass
class AblationResult:
    cells: pd.DataFrame     # ABLATION_COLUMNS
    table: pd.DataFrame     # ABLATION_TABLE_COLUMNS
    out_dir: Path


def run_ablation(grid: AblationGrid, source: Dataset, target: Dataset, out_dir: str | Path | None = None,
                 workers: int = 1, progress: bool = False) -> AblationResult:
    """One fit + evaluate per grid value, shared seeds; mean ± std target Dice per value."""
    out_dir = Path(out_dir) if out_dir else settings.runs_dir() / "ablation" / grid.axis
    jobs = [
        CellJob((grid.axis, value), grid.config_for(value), out_dir / "cells" / f"{grid.axis}_{value}")
        for value in grid.values
    ]
    logger.info(f"[ABLATE] {grid.axis}: {len(jobs)} values {grid.values}")
    results = run_cells(jobs, source, target, workers=workers, progress=progress)

    cells = pd.DataFrame(
        [{"axis": grid.axis, "value": str(job.key[1]), **row} for job, rows in zip(jobs, results) for row in rows],
        columns=ABLATION_COLUMNS,
    )
    table = mean_std_table(cells, ["axis", "value"], "target_dice")
    write_table(cells, out_dir / "ablation_cells.csv", ABLATION_COLUMNS)
    write_table(table, out_dir / "ablation_table.csv", ABLATION_TABLE_COLUMNS)
    write_table(table, out_dir / "ablation_plot.csv", ["axis", "value", "mean", "std"])
    logger.info(f"[ABLATE] tables written to {out_dir}")
    return AblationResult(cells, table, out_dir)
