"""
Dataset — images, masks and where each item came from.

A Dataset is what every source produces and what the trainer consumes:

    images   [1, H, W] float maps in [0, 1]
    masks    [H, W] integer class maps (None for an unlabeled target domain)
    tag      source | target | heldout

split() carves the three pieces one training run needs out of a source and a
target dataset: source-train, source-val, and a subsampled target pool.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import train_test_split
from sklearn.utils import resample

from engine.errors import EmptyDatasetError, EmptySplitError, LabelRangeError, ShapeError, UsageError

logger = logging.getLogger(__name__)

DOMAIN_TAGS = ("source", "target", "heldout")


@dataclass
class Dataset:
    images: list[np.ndarray]
    masks: list[np.ndarray] | None
    domain_tag: str = "source"
    manifest: list[dict] = field(default_factory=list)
    num_classes: int = 2

    def __post_init__(self):
        if self.domain_tag not in DOMAIN_TAGS:
            raise UsageError(f"domain tag must be one of {DOMAIN_TAGS}, got '{self.domain_tag}'")
        if self.masks is not None:
            if len(self.masks) != len(self.images):
                raise ShapeError(f"{len(self.images)} images but {len(self.masks)} masks")
            for i, mask in enumerate(self.masks):
                if mask.size and int(mask.max()) >= self.num_classes:
                    raise LabelRangeError(
                        f"item {i}: mask holds class {int(mask.max())}, only {self.num_classes} classes"
                    )
        if not self.manifest:
            self.manifest = [{"index": i} for i in range(len(self.images))]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return self.masks is not None

    @property
    def image_size(self) -> int:
        if not self.images:
            raise EmptyDatasetError("empty dataset has no image size")
        return self.images[0].shape[-1]

    def subset(self, indices, domain_tag: str | None = None) -> "Dataset":
        indices = [int(i) for i in indices]
        return Dataset(
            images=[self.images[i] for i in indices],
            masks=None if self.masks is None else [self.masks[i] for i in indices],
            domain_tag=domain_tag or self.domain_tag,
            manifest=[self.manifest[i] for i in indices],
            num_classes=self.num_classes,
        )

    def unlabeled(self) -> "Dataset":
        """Same images, masks dropped. Target data only ever reaches training like this."""
        return Dataset(self.images, None, self.domain_tag, list(self.manifest), self.num_classes)

    def image_batch(self, indices) -> np.ndarray:
        """[B, 1, H, W]"""
        return np.stack([self.images[int(i)] for i in indices]).astype(np.float64)

    def mask_batch(self, indices) -> np.ndarray:
        """[B, H, W]"""
        if self.masks is None:
            raise UsageError(f"{self.domain_tag} dataset has no masks")
        return np.stack([self.masks[int(i)] for i in indices]).astype(np.int64)

    def fingerprint(self) -> str:
        """Hash of the image (and mask) bytes."""
        h = hashlib.sha256()
        for image in self.images:
            h.update(np.ascontiguousarray(image, dtype=np.float64).tobytes())
        for mask in self.masks or []:
            h.update(np.ascontiguousarray(mask, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def concat(cls, datasets: list["Dataset"], domain_tag: str) -> "Dataset":
        """Pool several datasets into one (multi-site training)."""
        if not datasets:
            raise EmptyDatasetError("nothing to concatenate")
        labeled = all(d.labeled for d in datasets)
        return cls(
            images=[img for d in datasets for img in d.images],
            masks=[m for d in datasets for m in d.masks] if labeled else None,
            domain_tag=domain_tag,
            manifest=[entry for d in datasets for entry in d.manifest],
            num_classes=max(d.num_classes for d in datasets),
        )


def _count(n: int, fraction: float) -> int:
    if not 0.0 < fraction <= 1.0:
        raise UsageError(f"fraction must be in (0, 1], got {fraction}")
    # half rounds up: 2.5 -> 3
    return int(math.floor(n * fraction + 0.5))


def split(source: Dataset, target: Dataset, val_fraction: float, target_fraction: float,
          seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """
    (source_train, source_val, target_pool), all three disjoint.

    val takes n·val_fraction source items and the target pool
    m·target_fraction target items, both rounded half up. The pool is
    drawn without replacement, masks stripped. The same seed always gives the same three index sets.
    """
    if len(source) == 0:
        raise EmptyDatasetError("source dataset is empty")
    if len(target) == 0:
        raise EmptyDatasetError("target dataset is empty")
    if not 0.0 < val_fraction < 1.0:
        raise UsageError(f"val_fraction must be in (0, 1), got {val_fraction}")

    n_val = _count(len(source), val_fraction)
    if n_val == 0 or n_val == len(source):
        raise EmptySplitError(
            f"val_fraction {val_fraction} on {len(source)} source items leaves an empty split"
        )
    n_pool = _count(len(target), target_fraction)
    if n_pool == 0:
        raise EmptySplitError(
            f"target_fraction {target_fraction} on {len(target)} target items selects nothing"
        )

    val_seed, pool_seed = np.random.SeedSequence(seed).generate_state(2)
    train_idx, val_idx = train_test_split(
        np.arange(len(source)), test_size=n_val, random_state=int(val_seed), shuffle=True,
    )
    pool_idx = resample(
        np.arange(len(target)), replace=False, n_samples=n_pool, random_state=int(pool_seed),
    )
    logger.debug(f"[SPLIT] seed={seed} train={len(train_idx)} val={len(val_idx)} target_pool={len(pool_idx)}")
    return (
        source.subset(sorted(train_idx)),
        source.subset(sorted(val_idx)),
        target.subset(sorted(pool_idx)).unlabeled(),
    )
