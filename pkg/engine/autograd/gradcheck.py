"""
Finite-difference gradient checking.

For a scalar function f of some arrays, nudge every entry by ±eps, take the
centred difference (f(x+eps) − f(x−eps)) / 2eps, and compare with what
backward() produced. Error per entry is

    |autodiff − numeric| / (|numeric| + 1e-8)

and an input reports its worst entry.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from engine.autograd.tensor import Tensor, backward

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5


@dataclass
class GradcheckResult:
    """Worst relative error seen for one op over all its randomized cases."""
    name: str
    max_rel_error: float
    tolerance: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


def numeric_gradient(fn: Callable[[list[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                     index: int, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of fn w.r.t. arrays[index]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + eps
        plus = fn([Tensor(a) for a in base]).item()
        flat[j] = original - eps
        minus = fn([Tensor(a) for a in base]).item()
        flat[j] = original
        grad.reshape(-1)[j] = (plus - minus) / (2 * eps)
    return grad


def autodiff_gradients(fn: Callable[[list[Tensor]], Tensor],
                       arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(inputs))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-entry |a − n| / (|n| + 1e-8); 0.0 for empty arrays."""
    if np.size(numeric) == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def check_gradients(fn: Callable[[list[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                    wrt: Sequence[int] | None = None, eps: float = DEFAULT_EPS) -> float:
    """Worst relative error over the checked inputs (all of them by default)."""
    wrt = range(len(arrays)) if wrt is None else wrt
    analytic = autodiff_gradients(fn, arrays)
    worst = 0.0
    for i in wrt:
        numeric = numeric_gradient(fn, arrays, i, eps)
        worst = max(worst, relative_error(analytic[i], numeric))
    return worst
