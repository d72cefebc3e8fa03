import numpy as np
import pytest

from engine.errors import EmptySplitError, LabelRangeError, ShapeError, UsageError
from sources.dataset import Dataset, split


def _toy(n, tag="source", labeled=True):
    images = [np.full((1, 4, 4), i, dtype=float) for i in range(n)]
    masks = [np.zeros((4, 4), dtype=np.int64) for _ in range(n)] if labeled else None
    return Dataset(images, masks, tag)


class TestDataset:
    def test_manifest_defaults_to_indices(self):
        assert _toy(3).manifest == [{"index": 0}, {"index": 1}, {"index": 2}]

    def test_label_range_checked(self):
        with pytest.raises(LabelRangeError):
            Dataset([np.zeros((1, 2, 2))], [np.full((2, 2), 3)], "source", num_classes=2)

    def test_mask_count_checked(self):
        with pytest.raises(ShapeError):
            Dataset([np.zeros((1, 2, 2))] * 2, [np.zeros((2, 2))], "source")

    def test_unknown_domain_tag(self):
        with pytest.raises(UsageError):
            _toy(1, tag="validation")

    def test_unlabeled_drops_masks_only(self):
        data = _toy(3)
        bare = data.unlabeled()
        assert not bare.labeled and len(bare) == 3
        with pytest.raises(UsageError):
            bare.mask_batch([0])

    def test_batches(self):
        data = _toy(4)
        assert data.image_batch([2, 0]).shape == (2, 1, 4, 4)
        assert data.image_batch([2, 0])[0, 0, 0, 0] == 2.0
        assert data.mask_batch([1]).dtype == np.int64

    def test_concat(self):
        pooled = Dataset.concat([_toy(2), _toy(3)], "source")
        assert len(pooled) == 5 and pooled.labeled
        mixed = Dataset.concat([_toy(2), _toy(1, labeled=False)], "target")
        assert not mixed.labeled


class TestSplit:
    def test_sizes_and_disjointness(self):
        source, target = _toy(20), _toy(10, "target")
        train, val, pool = split(source, target, 0.2, 0.3, seed=5)
        assert (len(train), len(val), len(pool)) == (16, 4, 3)
        train_ids = {float(img[0, 0, 0]) for img in train.images}
        val_ids = {float(img[0, 0, 0]) for img in val.images}
        assert not train_ids & val_ids
        assert train_ids | val_ids == set(map(float, range(20)))

    @pytest.mark.parametrize("count, fraction, expected", [(5, 0.5, 3), (10, 0.25, 3), (6, 0.75, 5)])
    def test_half_counts_round_up(self, count, fraction, expected):
        _, _, pool = split(_toy(10), _toy(count, "target"), 0.2, fraction, seed=0)
        assert len(pool) == expected

    def test_pool_never_has_masks(self):
        _, _, pool = split(_toy(10), _toy(10, "target"), 0.2, 1.0, seed=0)
        assert pool.masks is None and pool.domain_tag == "target"

    def test_same_seed_same_split(self):
        source, target = _toy(15), _toy(9, "target")
        a = split(source, target, 0.2, 0.5, seed=3)
        b = split(source, target, 0.2, 0.5, seed=3)
        for x, y in zip(a, b):
            assert x.fingerprint() == y.fingerprint()

    def test_val_does_not_depend_on_target_fraction(self):
        source, target = _toy(15), _toy(9, "target")
        _, val_small, _ = split(source, target, 0.2, 0.3, seed=3)
        _, val_full, _ = split(source, target, 0.2, 1.0, seed=3)
        assert val_small.fingerprint() == val_full.fingerprint()

    def test_empty_val(self):
        with pytest.raises(EmptySplitError):
            split(_toy(2), _toy(4, "target"), 0.1, 1.0, seed=0)

    def test_empty_pool(self):
        with pytest.raises(EmptySplitError):
            split(_toy(10), _toy(6, "target"), 0.2, 0.03, seed=0)
