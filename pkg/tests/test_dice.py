import numpy as np
import pytest

from engine.errors import ShapeError
from validation.dice import dice


def test_overlap():
    pred = np.array([[1, 1, 0, 0]])
    true = np.array([[1, 0, 0, 1]])
    assert dice(pred, true) == pytest.approx(2 * 1 / (2 + 2))


def test_both_empty_is_perfect():
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_one_empty_is_zero():
    assert dice(np.zeros((3, 3)), np.eye(3, dtype=int)) == 0.0


def test_other_class():
    pred = np.array([2, 2, 1])
    true = np.array([2, 0, 1])
    assert dice(pred, true, class_id=2) == pytest.approx(2 / 3)
    assert dice(pred, true, class_id=1) == 1.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))
