"""
One fit + evaluate per experiment cell, optionally in parallel.

A cell is one fully specified ExperimentConfig (a method at a target
fraction, or one ablation value). Running a cell trains every split seed and
scores each split's best checkpoint on:

    source   the split's own held-out source-val images
    target   the full labeled target set (labels used only here)
    heldout  an optional third domain nobody trained or adapted on

Cells share nothing while they run; the orchestrator only merges their rows.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

from engine.config import ExperimentConfig
from engine.trainer import fit
from sources.dataset import Dataset, split
from validation.evaluate import evaluate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CellJob:
    key: tuple
    config: ExperimentConfig
    run_dir: Path


def run_cell(job: CellJob, source: Dataset, target: Dataset, heldout: Dataset | None = None,
             progress: bool = False) -> list[dict]:
    """One row per split seed: seed plus source/target(/heldout) mean Dice."""
    cfg = job.config
    artifacts = fit(cfg, source, target, run_dir=job.run_dir, progress=progress)
    rows = []
    for k, (seed, checkpoint) in enumerate(zip(artifacts.split_seeds, artifacts.checkpoints)):
        _, val, _ = split(source, target, cfg.val_fraction, cfg.target_fraction, seed)
        row = {
            "seed": seed,
            "source_dice": evaluate(checkpoint, val, split=k).domain_mean("source"),
            "target_dice": evaluate(checkpoint, target, split=k).domain_mean("target"),
        }
        if heldout is not None:
            row["heldout_dice"] = evaluate(checkpoint, heldout, split=k).domain_mean("heldout")
        rows.append(row)
    logger.info(f"[CELL] {job.key}: target Dice per seed {[round(r['target_dice'], 4) for r in rows]}")
    return rows


def run_cells(jobs: list[CellJob], source: Dataset, target: Dataset, heldout: Dataset | None = None,
              workers: int = 1, progress: bool = False) -> list[list[dict]]:
    """Rows for every job, in job order. Parallel runs give the same rows as sequential ones."""
    runner = partial(run_cell, source=source, target=target, heldout=heldout, progress=progress)
    if workers <= 1 or len(jobs) <= 1:
        return [runner(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(runner, jobs))
