"""Dice overlap between a predicted and a true class map."""

import numpy as np

from engine.errors import ShapeError


def dice(pred_mask, true_mask, class_id: int = 1) -> float:
    """
    2|P∩T| / (|P| + |T|) for the pixels labeled class_id.
    Both masks empty → 1.0 (predicting absence when it's absent is right).
    """
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise ShapeError(f"dice: mask shapes differ {list(pred.shape)} vs {list(true.shape)}")
    p = pred == class_id
    t = true == class_id
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total
