"""
User-supplied image/mask pairs listed in a manifest.

Manifest format: one pair per line, tab-separated, paths relative to the
manifest file:

    images/0001.pgm <TAB> masks/0001.pgm

Images are 8- or 16-bit grayscale PGM, scaled to [0, 1]. Masks are 8-bit PGM
holding raw class ids (0 = background). An unlabeled (target) manifest may
leave out the mask column entirely. Lines starting with `#` are comments.

Generated datasets are exported in the same format, so real exports and
synthetic data go through one loader.
"""

import io
import logging
from pathlib import Path

import cv2
import numpy as np
import pandas as pd

from engine.errors import EmptyDatasetError, LabelRangeError, MissingFileError, SizeMismatchError
from sources.dataset import Dataset

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"


def _read_pgm(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"file listed in manifest not found: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise MissingFileError(f"could not decode image: {path}")
    if raw.ndim != 2:
        raise SizeMismatchError(f"{path} is not a single-channel image")
    return raw


def _to_unit(raw: np.ndarray) -> np.ndarray:
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    return raw.astype(np.float64) / scale


def read_manifest(manifest_path: str | Path) -> pd.DataFrame:
    """Manifest rows as a DataFrame with `image` and (possibly empty) `mask` columns."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    # only whole lines starting with '#' are comments, '#' inside a path is kept
    lines = [line for line in manifest_path.read_text().splitlines()
             if not line.lstrip().startswith("#")]
    try:
        df = pd.read_csv(io.StringIO("\n".join(lines)), sep="\t", header=None, dtype=str,
                         skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise EmptyDatasetError(f"manifest {manifest_path} lists no image pairs")
    if df.empty:
        raise EmptyDatasetError(f"manifest {manifest_path} lists no image pairs")
    df = df.iloc[:, :2].apply(lambda col: col.str.strip())
    df.columns = ["image", "mask"][: df.shape[1]]
    if "mask" not in df:
        df["mask"] = None
    return df


def load_external(manifest_path: str | Path, num_classes: int = 2, domain_tag: str = "source") -> Dataset:
    """Load every pair in a manifest. Masks are optional only if no row has one."""
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    base = manifest_path.parent
    has_mask = rows["mask"].notna()
    labeled = bool(has_mask.all())
    if has_mask.any() and not labeled:
        missing = int((~has_mask).values.argmax())
        raise MissingFileError(f"row {missing} of {manifest_path} has no mask while others do")

    images, masks, manifest = [], [], []
    size = None
    for i, row in enumerate(rows.itertuples(index=False)):
        image = _to_unit(_read_pgm(base / row.image))
        if size is None:
            size = image.shape
        elif image.shape != size:
            raise SizeMismatchError(f"row {i}: {row.image} is {image.shape}, earlier images are {size}")
        entry = {"index": i, "image": str(row.image)}
        if labeled:
            mask = _read_pgm(base / row.mask)
            if mask.shape != image.shape:
                raise SizeMismatchError(
                    f"mask/image size mismatch for pair ({row.image}, {row.mask}): "
                    f"{mask.shape} vs {image.shape}"
                )
            if int(mask.max()) >= num_classes:
                raise LabelRangeError(
                    f"{row.mask} holds class id {int(mask.max())}, only {num_classes} classes"
                )
            masks.append(mask.astype(np.int64))
            entry["mask"] = str(row.mask)
        images.append(image[None, :, :])
        manifest.append(entry)

    logger.info(f"[DATA] loaded {len(images)} {'labeled' if labeled else 'unlabeled'} images from {manifest_path}")
    return Dataset(images, masks if labeled else None, domain_tag, manifest, num_classes)


def export(dataset: Dataset, directory: str | Path, bits: int = 16) -> Path:
    """Write images/masks as PGM plus a manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    if dataset.labeled:
        (directory / "masks").mkdir(parents=True, exist_ok=True)
    dtype, scale = (np.uint16, 65535.0) if bits == 16 else (np.uint8, 255.0)

    lines = []
    for i, image in enumerate(dataset.images):
        image_rel = f"images/{i:05d}.pgm"
        pixels = np.round(np.clip(image[0], 0.0, 1.0) * scale).astype(dtype)
        cv2.imwrite(str(directory / image_rel), pixels)
        if dataset.labeled:
            mask_rel = f"masks/{i:05d}.pgm"
            cv2.imwrite(str(directory / mask_rel), dataset.masks[i].astype(np.uint8))
            lines.append(f"{image_rel}\t{mask_rel}")
        else:
            lines.append(image_rel)

    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text("\n".join(lines) + "\n")
    logger.info(f"[DATA] exported {len(lines)} {dataset.domain_tag} items to {directory}")
    return manifest_path
