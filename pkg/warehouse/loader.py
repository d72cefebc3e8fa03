"""
Reads and writes the run CSVs and builds aggregate rows.

This is the bridge between "rows the trainer/evaluator produced" and
"tables you can read or plot". Every table goes through the same two
checks: the header is exactly the schema's, and mean/std rows can always be
recomputed from the rows above them.

Usage:
    df = read_table(layout.metrics_csv, METRICS_COLUMNS)
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from engine.errors import CheckpointFormatError, MissingFileError
from warehouse.schema import AGGREGATE_ROWS

logger = logging.getLogger(__name__)


def write_table(df: pd.DataFrame, path: str | Path, columns: list[str]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.reindex(columns=columns).to_csv(path, index=False, float_format="%.17g")


def append_rows(path: str | Path, rows: list[dict], columns: list[str]):
    """Append rows, writing the header if the file is new."""
    path = Path(path)
    fresh = not path.exists()
    pd.DataFrame(rows, columns=columns).to_csv(
        path, mode="a", header=fresh, index=False, float_format="%.17g",
    )


def read_table(path: str | Path, columns: list[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"table not found: {path}")
    df = pd.read_csv(path, float_precision="round_trip")
    if list(df.columns) != columns:
        raise CheckpointFormatError(f"{path}: header {list(df.columns)} != {columns}")
    return df


def with_aggregates(per_split: pd.DataFrame, key: str, value_columns: list[str]) -> pd.DataFrame:
    """
    per-split rows + a `mean` row + a `std` row (population std, ddof=0).
    The aggregate rows carry their name in the `key` column.
    """
    values = per_split[value_columns].astype(float)
    mean_row = {key: AGGREGATE_ROWS[0], **values.mean(axis=0).to_dict()}
    std_row = {key: AGGREGATE_ROWS[1], **values.std(axis=0, ddof=0).to_dict()}
    rows = per_split.copy()
    rows[key] = rows[key].astype(str)
    return pd.concat([rows, pd.DataFrame([mean_row, std_row])], ignore_index=True)


def aggregates_consistent(table: pd.DataFrame, key: str, value_columns: list[str],
                          tolerance: float = 1e-12) -> bool:
    """Do the mean/std rows equal a recomputation from the per-split rows?"""
    is_agg = table[key].astype(str).isin(AGGREGATE_ROWS)
    body = table.loc[~is_agg, value_columns].astype(float)
    stored = table.loc[is_agg].set_index(table.loc[is_agg, key].astype(str))[value_columns].astype(float)
    expected_mean = body.mean(axis=0).to_numpy()
    expected_std = body.std(axis=0, ddof=0).to_numpy()
    return bool(
        np.allclose(stored.loc["mean"].to_numpy(), expected_mean, rtol=0, atol=tolerance, equal_nan=True)
        and np.allclose(stored.loc["std"].to_numpy(), expected_std, rtol=0, atol=tolerance, equal_nan=True)
    )


def mean_std_table(cells: pd.DataFrame, group_columns: list[str], value: str) -> pd.DataFrame:
    """
    Collapse per-seed rows into mean ± std per group. `cell` is the
    human-readable "0.812 ± 0.021" string.
    """
    grouped = cells.groupby(group_columns, sort=False)[value]
    table = grouped.agg(mean="mean", std=lambda s: float(np.std(s.to_numpy(dtype=float), ddof=0))).reset_index()
    table["cell"] = [f"{m:.3f} ± {s:.3f}" for m, s in zip(table["mean"], table["std"])]
    return table
