"""
Run a checkpoint over a labeled dataset and score it with Dice.

Prediction is the argmax over classes per pixel. A report keeps every
per-image score, so the per-split and aggregate rows can always be rebuilt
from it.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from engine import segnet
from engine.autograd import Tensor
from engine.errors import EmptyDatasetError, ShapeError, UsageError
from engine.trainer import frozen
from sources.dataset import Dataset
from validation.dice import dice
from warehouse.checkpoint import load_model
from warehouse.loader import with_aggregates
from warehouse.schema import EVAL_COLUMNS

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    per_image: pd.DataFrame          # EVAL_COLUMNS
    fingerprint: str

    def per_split(self) -> pd.DataFrame:
        """Mean Dice per (domain, split)."""
        return (self.per_image.groupby(["domain", "split"], sort=True)["dice"]
                .mean().reset_index())

    def summary(self) -> pd.DataFrame:
        """Per domain: one row per split, then mean and std over splits."""
        blocks = []
        for domain, rows in self.per_split().groupby("domain", sort=False):
            table = with_aggregates(rows[["split", "dice"]].reset_index(drop=True), "split", ["dice"])
            table.insert(0, "domain", domain)
            blocks.append(table)
        return pd.concat(blocks, ignore_index=True)

    def domain_mean(self, domain: str) -> float:
        rows = self.per_split()
        rows = rows[rows["domain"] == domain]
        if rows.empty:
            raise UsageError(f"no '{domain}' rows in this report")
        return float(rows["dice"].mean())

    def domain_std(self, domain: str) -> float:
        rows = self.per_split()
        return float(np.std(rows.loc[rows["domain"] == domain, "dice"].to_numpy(), ddof=0))

    @classmethod
    def merge(cls, reports: list["EvalReport"]) -> "EvalReport":
        digest = hashlib.md5("".join(r.fingerprint for r in reports).encode()).hexdigest()[:12]
        return cls(pd.concat([r.per_image for r in reports], ignore_index=True), digest)


def model_fingerprint(model: segnet.UNetModel) -> str:
    h = hashlib.md5(model.config.model_dump_json().encode())
    h.update(model.parameter_bytes())
    return h.hexdigest()[:12]


def predict(model: segnet.UNetModel, images: np.ndarray, batch_size: int = 10) -> np.ndarray:
    """[B, 1, H, W] → [B, H, W] class ids."""
    still = frozen(model)
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = segnet.forward(still, Tensor(images[start:start + batch_size]))
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out, axis=0)


def evaluate(checkpoint: segnet.UNetModel | str | Path, dataset: Dataset, split: int = 0,
             class_id: int = 1, batch_size: int = 10, workers: int = 1) -> EvalReport:
    """Dice of every image in `dataset` under one checkpoint."""
    model = checkpoint if isinstance(checkpoint, segnet.UNetModel) else load_model(checkpoint)
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    if not dataset.labeled:
        raise UsageError(f"{dataset.domain_tag} dataset has no masks to score against")
    cfg = model.config
    if dataset.image_size != cfg.input_size or dataset.images[0].shape[0] != cfg.in_channels:
        raise ShapeError(
            f"checkpoint expects {cfg.in_channels}×{cfg.input_size}×{cfg.input_size} images, "
            f"dataset has {list(dataset.images[0].shape)}"
        )

    chunks = [np.arange(s, min(s + batch_size, len(dataset))) for s in range(0, len(dataset), batch_size)]

    def score(idx: np.ndarray) -> list[float]:
        preds = predict(model, dataset.image_batch(idx), batch_size)
        return [dice(p, dataset.masks[i], class_id) for p, i in zip(preds, idx)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = [s for chunk in pool.map(score, chunks) for s in chunk]
    else:
        scores = [s for idx in chunks for s in score(idx)]

    per_image = pd.DataFrame({
        "split": split, "domain": dataset.domain_tag,
        "index": np.arange(len(dataset)), "dice": scores,
    }, columns=EVAL_COLUMNS)
    logger.debug(f"[EVAL] split {split} {dataset.domain_tag}: mean Dice {np.mean(scores):.4f} over {len(scores)}")
    return EvalReport(per_image, model_fingerprint(model))
