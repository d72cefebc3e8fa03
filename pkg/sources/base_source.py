"""
Base source class that every dataset source inherits from.
Handles caching so a dataset that took a while to render (or decode) is
built once and reloaded bit-exactly on the next run.
"""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from engine import settings
from sources.dataset import Dataset

logger = logging.getLogger(__name__)


class BaseSource:
    """
    Every source extends this class and implements `_build(**params)`. It gives you:
    - Local caching keyed by a hash of the build parameters
    - One `load()` entry point that checks the cache first
    """

    def __init__(self, source_name: str, cache_dir: str | Path | None = None):
        self.source_name = source_name
        root = Path(cache_dir) if cache_dir is not None else settings.data_dir() / "cache"
        self.cache_dir = root / source_name
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _cache_key(self, params: dict) -> str:
        """Turn the build parameters into a stable filename stem."""
        blob = json.dumps(params, sort_keys=True, default=str)
        return hashlib.md5(blob.encode()).hexdigest()[:12]

    def _get_cached(self, key: str) -> Dataset | None:
        arrays_file = self.cache_dir / f"{key}.npz"
        meta_file = self.cache_dir / f"{key}.json"
        if not (arrays_file.exists() and meta_file.exists()):
            return None
        meta = json.loads(meta_file.read_text())
        with np.load(arrays_file) as arrays:
            images = list(arrays["images"])
            masks = list(arrays["masks"]) if "masks" in arrays.files else None
        return Dataset(images, masks, meta["domain_tag"], meta["manifest"], meta["num_classes"])

    def _save_cache(self, key: str, dataset: Dataset):
        arrays = {"images": np.stack(dataset.images)}
        if dataset.masks is not None:
            arrays["masks"] = np.stack(dataset.masks)
        np.savez(self.cache_dir / f"{key}.npz", **arrays)
        meta = {"domain_tag": dataset.domain_tag, "manifest": dataset.manifest,
                "num_classes": dataset.num_classes}
        (self.cache_dir / f"{key}.json").write_text(json.dumps(meta, indent=2, default=str))

    def _build(self, **params) -> Dataset:
        raise NotImplementedError

    def load(self, use_cache: bool = True, **params) -> Dataset:
        """Build the dataset for these parameters, or reload it from the cache."""
        key = self._cache_key({"source": self.source_name, **params})
        if use_cache:
            cached = self._get_cached(key)
            if cached is not None:
                logger.info(f"[CACHE HIT] {self.source_name}/{key}")
                return cached

        dataset = self._build(**params)
        if use_cache and len(dataset):
            self._save_cache(key, dataset)
        return dataset
