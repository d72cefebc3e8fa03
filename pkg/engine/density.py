"""
Gaussian kernel density estimates over flattened feature vectors.

    p(x) = (1/N) Σ_n  N(x; x_n, σ²I)

evaluated in log space the whole way:

    log p(x) = logsumexp_n(−‖x − x_n‖² / 2σ²) − ln N − d·ln σ − (d/2)·ln 2π

The kernel is the fully normalized d-dimensional Gaussian, so two KDEs with
different bandwidths stay comparable (needed for the JSD between them).

The bandwidth σ is data-driven: the mean distance from each sample to its
nearest other sample. σ is a plain float, never part of the autodiff graph.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import pairwise_distances

from engine.autograd import Tensor, logsumexp, mul, add, pairwise_sqdist
from engine.config import BandwidthMode
from engine.errors import DegenerateBandwidthError, NumericalError, ShapeError, UsageError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KdeModel:
    """A sample bank x_1..x_N (N×d) with its bandwidth σ."""
    samples: Tensor
    bandwidth: float
    dim: int
    log_norm: float   # −d·ln σ − (d/2)·ln 2π, the per-kernel log normalizer

    @property
    def count(self) -> int:
        return self.samples.shape[0]


def _as_matrix(values) -> np.ndarray:
    data = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2:
        raise ShapeError(f"expected an N×d sample matrix, got shape {list(data.shape)}")
    return data


# ─── BANDWIDTH ───

def nearest_neighbors(samples) -> tuple[np.ndarray, np.ndarray]:
    """
    γ for every sample: (index of the nearest other sample, its distance).
    Ties go to the lowest index.
    """
    x = _as_matrix(samples)
    if x.shape[0] < 2:
        raise UsageError(f"nearest neighbours need at least 2 samples, got {x.shape[0]}")
    dists = pairwise_distances(x, metric="euclidean")
    np.fill_diagonal(dists, np.inf)
    idx = dists.argmin(axis=1)
    return idx, dists[np.arange(len(idx)), idx]


def estimate_bandwidth(samples, mode: BandwidthMode | str = BandwidthMode.MEAN_NN_DISTANCE) -> float:
    """
    Mean nearest-neighbour distance (default) or mean squared NN distance.

    Raises DegenerateBandwidthError if every sample is the same point.
    """
    mode = BandwidthMode(mode)
    x = _as_matrix(samples)
    if x.shape[0] < 2:
        raise UsageError(f"bandwidth estimation needs at least 2 samples, got {x.shape[0]}")
    if np.all(x == x[0]):
        raise DegenerateBandwidthError("all KDE samples are identical, bandwidth would be 0")
    _, nn_dist = nearest_neighbors(x)
    if mode is BandwidthMode.MEAN_NN_SQUARED:
        sigma = float(np.mean(nn_dist ** 2))
    else:
        sigma = float(np.mean(nn_dist))
    if not sigma > 0:
        raise DegenerateBandwidthError("nearest-neighbour bandwidth came out as 0")
    return sigma


def bandwidth_floor(dim: int) -> float:
    return 1e-6 * math.sqrt(dim)


def safe_bandwidth(samples, mode: BandwidthMode | str = BandwidthMode.MEAN_NN_DISTANCE,
                   label: str = "features") -> float:
    """estimate_bandwidth, clamped at the floor; a degenerate bank logs a warning instead of failing."""
    x = _as_matrix(samples)
    floor = bandwidth_floor(x.shape[1])
    try:
        return max(estimate_bandwidth(x, mode), floor)
    except DegenerateBandwidthError:
        logger.warning(f"[KDE] degenerate {label} bank (all samples identical), using floor σ={floor:.3g}")
        return floor


# ─── KDE ───

def build_kde(samples, bandwidth: float) -> KdeModel:
    if not (math.isfinite(bandwidth) and bandwidth > 0):
        raise UsageError(f"bandwidth must be finite and > 0, got {bandwidth}")
    bank = samples if isinstance(samples, Tensor) else Tensor(_as_matrix(samples))
    if bank.ndim == 1:
        bank = Tensor(_as_matrix(bank))
    if bank.ndim != 2:
        raise ShapeError(f"KDE samples must be N×d, got shape {list(bank.shape)}")
    if bank.shape[0] < 2:
        raise UsageError(f"a KDE needs at least 2 samples, got {bank.shape[0]}")
    if not np.all(np.isfinite(bank.data)):
        raise NumericalError("KDE samples contain NaN/Inf")
    dim = bank.shape[1]
    log_norm = -dim * math.log(bandwidth) - 0.5 * dim * LOG_2PI
    return KdeModel(samples=bank, bandwidth=float(bandwidth), dim=dim, log_norm=log_norm)


def log_density(model: KdeModel, queries) -> Tensor:
    """log p(q) for each query row (M×d → M). Differentiable in queries and samples."""
    q = queries if isinstance(queries, Tensor) else Tensor(_as_matrix(queries))
    if q.ndim == 1:
        q = Tensor(_as_matrix(q))
    if q.ndim != 2 or q.shape[1] != model.dim:
        raise ShapeError(f"query dim {q.shape[-1]} doesn't match KDE dim {model.dim}")
    sq = pairwise_sqdist(q, model.samples)
    scaled = mul(sq, -0.5 / model.bandwidth ** 2)
    return add(logsumexp(scaled, axes=1), model.log_norm - math.log(model.count))
