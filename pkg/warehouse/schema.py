"""
Run-directory schema for density-match.
Fixes where every artifact of a run lives and the exact columns of every CSV.

Think of a run directory like a small database: each CSV is a table with a
fixed header, and the checkpoints folder holds one best model per split.

    <runs>/<run_name>/
        config.txt           the flat key=value config the run used
        metrics.csv          one row per (split, epoch)
        summary.csv          one row per split + mean / std rows
        checkpoints/
            split{k}.dmck        best model of split k (+ .json sidecar)
            split{k}.state.dmck  resumable train state (+ .json sidecar)

Usage:
    layout = RunLayout(runs_dir() / "jsd_desk").create()
"""

from dataclasses import dataclass
from pathlib import Path

# ─── TABLE HEADERS ───

METRICS_COLUMNS = ["split", "epoch", "seg_loss", "div_loss", "val_loss", "sigma_src", "sigma_tgt"]

SUMMARY_COLUMNS = ["split", "seed", "best_epoch", "best_val_loss", "final_seg_loss", "final_div_loss"]

# Per-image Dice dump from `eval`
EVAL_COLUMNS = ["split", "domain", "index", "dice"]

MATRIX_COLUMNS = ["method", "target_fraction", "seed", "source_dice", "target_dice"]
MATRIX_TABLE_COLUMNS = ["method", "target_fraction", "mean", "std", "cell"]
SIGN_TEST_COLUMNS = ["method", "baseline", "target_fraction", "mean_diff", "wins", "losses", "ties", "p_value"]

ABLATION_COLUMNS = ["axis", "value", "seed", "source_dice", "target_dice"]
ABLATION_TABLE_COLUMNS = ["axis", "value", "mean", "std", "cell"]

MULTISITE_COLUMNS = ["protocol", "method", "site", "role", "seed", "dice"]

GRADCHECK_COLUMNS = ["op", "cases", "max_rel_error", "tolerance", "passed"]

# Rows appended under the per-split rows of a summary
AGGREGATE_ROWS = ("mean", "std")

# Keys of the "state" section of a checkpoint sidecar
SIDECAR_STATE_KEYS = ("split", "epoch", "best_val_loss", "best_epoch", "rng", "sigma_src", "sigma_tgt",
                      "mmd_sigma", "opt_steps", "target_order", "target_pos")


@dataclass(frozen=True)
class RunLayout:
    root: Path

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def metrics_csv(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def summary_csv(self) -> Path:
        return self.root / "summary.csv"

    @property
    def config_txt(self) -> Path:
        return self.root / "config.txt"

    def checkpoint(self, split: int) -> Path:
        return self.checkpoints_dir / f"split{split}.dmck"

    def state(self, split: int) -> Path:
        return self.checkpoints_dir / f"split{split}.state.dmck"

    def create(self) -> "RunLayout":
        """Make the directories. Safe to run multiple times."""
        self.checkpoints_dir.mkdir(parents=True, exist_ok=True)
        return self


def write_config_text(path: Path, flat: dict[str, str]):
    lines = ["# density-match run config"] + [f"{key} = {value}" for key, value in flat.items()]
    path.write_text("\n".join(lines) + "\n")
