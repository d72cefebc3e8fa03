"""
Divergence — the density-matching losses and the combined training objective.

    L = L_seg(source) + λ · D[p_s, p_t]

D is one of:
  JSD    ½·KL[p_s‖M] + ½·KL[p_t‖M],  M = (p_s + p_t)/2   (the method)
  KL     KL[p_s‖p_t]                                      (one-directional)
  MMD-C  kernel MMD² with a fixed bandwidth
  MMD-B  kernel MMD² with the nearest-neighbour bandwidth
  NONE   nothing (plain supervised training)

JSD between two continuous KDE mixtures has no closed form. We evaluate both
KDEs on one shared finite support (the current source + target batch feature
rows), softmax-normalize each into a discrete distribution, and take the
discrete JSD. A shared support means M > 0 wherever either side is, so every
KL stays finite, and gradients reach the features through the support points.

Probabilities are carried as log-probabilities end to end; a probability of
exactly zero is represented as −inf and masked before any arithmetic.
"""

import math
from dataclasses import dataclass

import numpy as np

from engine.autograd import (
    Tensor, add, concat, div, exp, log_softmax, logsumexp, masked_fill, mean,
    mul, pairwise_sqdist, reshape, sub, sum_,
)
from engine.config import DivergenceConfig, DivergenceKind
from engine.density import KdeModel, log_density
from engine.errors import (
    DivergenceInfiniteError, NonFiniteLossError, ShapeError, UsageError,
)

LN2 = math.log(2.0)
_LOG_ZERO = -1e300  # stands in for log(0) inside logsumexp; exp() of it is exactly 0


@dataclass(frozen=True)
class DiscreteDist:
    """A distribution over S support points, stored as log-probabilities."""
    log_probs: Tensor

    @property
    def size(self) -> int:
        return self.log_probs.shape[0]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    @classmethod
    def from_probs(cls, probs, requires_grad: bool = False) -> "DiscreteDist":
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ShapeError(f"a discrete distribution needs a 1-D probability vector, got {list(p.shape)}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise UsageError(f"probabilities must be ≥ 0 and sum to 1 (sum={p.sum()!r})")
        with np.errstate(divide="ignore"):
            return cls(Tensor(np.log(p), requires_grad=requires_grad))


def _zero_mask(dist: DiscreteDist) -> np.ndarray:
    return np.isneginf(dist.log_probs.data)


def _check_support(p: DiscreteDist, q: DiscreteDist):
    if p.size != q.size:
        raise ShapeError(f"support sizes differ ({p.size} vs {q.size})")


# ─── KDE → DISCRETE ───

def kde_to_discrete(model: KdeModel, eval_points) -> DiscreteDist:
    """p_i ∝ KDE density at eval point i, normalized over the S eval points."""
    points = eval_points if isinstance(eval_points, Tensor) else Tensor(np.asarray(eval_points, dtype=np.float64))
    if points.ndim == 1:
        points = reshape(points, (points.shape[0], 1))
    if points.shape[0] < 2:
        raise UsageError(f"need at least 2 evaluation points, got {points.shape[0]}")
    return DiscreteDist(log_softmax(log_density(model, points), axis=0))


def shared_support(source_features: Tensor, target_features: Tensor) -> Tensor:
    """Union of both batches' feature rows: the support both KDEs are scored on."""
    return concat([source_features, target_features], axis=0)


# ─── KL / JSD ───

def kl(p: DiscreteDist, q: DiscreteDist) -> Tensor:
    """Σ p_i ln(p_i / q_i) in nats, with 0·ln(0/·) = 0."""
    _check_support(p, q)
    p_zero, q_zero = _zero_mask(p), _zero_mask(q)
    if np.any(q_zero & ~p_zero):
        raise DivergenceInfiniteError("KL is infinite: q_i = 0 where p_i > 0")
    lp = masked_fill(p.log_probs, p_zero, 0.0)
    lq = masked_fill(q.log_probs, p_zero, 0.0)
    weights = masked_fill(exp(lp), p_zero, 0.0)
    return sum_(mul(weights, sub(lp, lq)))


def _kl_to_mixture(lp: Tensor, log_m: Tensor) -> Tensor:
    return sum_(mul(exp(lp), sub(lp, log_m)))


def jsd(p_s: DiscreteDist, p_t: DiscreteDist) -> Tensor:
    """½{KL[p_s‖M] + KL[p_t‖M]}, M = (p_s + p_t)/2. Lies in [0, ln 2]; symmetric."""
    _check_support(p_s, p_t)
    size = p_s.size
    ls = masked_fill(p_s.log_probs, _zero_mask(p_s), _LOG_ZERO)
    lt = masked_fill(p_t.log_probs, _zero_mask(p_t), _LOG_ZERO)
    stacked = concat([reshape(ls, (1, size)), reshape(lt, (1, size))], axis=0)
    log_m = sub(logsumexp(stacked, axes=0), LN2)
    return mul(add(_kl_to_mixture(ls, log_m), _kl_to_mixture(lt, log_m)), 0.5)


# ─── MMD ───

def gaussian_kernel_mean(a: Tensor, b: Tensor, sigma: float) -> Tensor:
    """mean_ij exp(−‖a_i − b_j‖² / 2σ²)"""
    return mean(exp(mul(pairwise_sqdist(a, b), -0.5 / sigma ** 2)))


def mmd2(x, y, sigma: float) -> Tensor:
    """
    Biased (V-statistic) MMD²: mean k(X,X) + mean k(Y,Y) − 2·mean k(X,Y).
    Includes the diagonal terms, so it can't go negative beyond rounding.
    """
    if not sigma > 0:
        raise UsageError(f"MMD bandwidth must be > 0, got {sigma}")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    if x.ndim == 1:
        x = reshape(x, (x.shape[0], 1))
    if y.ndim == 1:
        y = reshape(y, (y.shape[0], 1))
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise UsageError("MMD needs at least one sample on each side")
    xx = gaussian_kernel_mean(x, x, sigma)
    yy = gaussian_kernel_mean(y, y, sigma)
    xy = gaussian_kernel_mean(x, y, sigma)
    return sub(add(xx, yy), mul(xy, 2.0))


# ─── SEGMENTATION LOSSES ───

def _one_hot(labels: np.ndarray, logits: Tensor) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise ShapeError(f"logits must be [B, C, H, W], got {list(logits.shape)}")
    batch, classes, height, width = logits.shape
    if labels.shape != (batch, height, width):
        raise ShapeError(f"labels {list(labels.shape)} don't match logits {list(logits.shape)}")
    if labels.size and (labels.max() >= classes or labels.min() < 0):
        raise UsageError(f"label id {int(labels.max())} out of range for {classes} classes")
    return (labels[:, None, :, :] == np.arange(classes)[None, :, None, None]).astype(np.float64)


def segmentation_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy."""
    one_hot = _one_hot(labels, logits)
    batch, _, height, width = logits.shape
    picked = sum_(mul(log_softmax(logits, axis=1), one_hot))
    return mul(picked, -1.0 / (batch * height * width))


def dice_loss(logits: Tensor, labels: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 − mean soft Dice over the foreground classes (class 0 is background)."""
    one_hot = _one_hot(labels, logits)
    classes = logits.shape[1]
    probs = exp(log_softmax(logits, axis=1))
    overlap = sum_(mul(probs, one_hot), axes=(0, 2, 3))
    predicted = sum_(probs, axes=(0, 2, 3))
    truth = one_hot.sum(axis=(0, 2, 3))
    scores = div(add(mul(overlap, 2.0), smooth), add(add(predicted, truth), smooth))
    weights = np.r_[0.0, np.full(classes - 1, 1.0 / (classes - 1))]
    return sub(1.0, sum_(mul(scores, weights)))


# ─── COMBINED OBJECTIVE ───

def _require_finite(term: str, value: Tensor):
    v = float(np.asarray(value.data).reshape(-1)[0])
    if not math.isfinite(v):
        raise NonFiniteLossError(term, v)


def combined_loss(seg: Tensor, div_term: Tensor | None, cfg: DivergenceConfig) -> Tensor:
    """seg + λ·div; with kind NONE (or λ = 0) it's just seg."""
    _require_finite("segmentation", seg)
    if cfg.kind is DivergenceKind.NONE or div_term is None or cfg.weight == 0.0:
        return seg
    _require_finite("divergence", div_term)
    return add(seg, mul(div_term, cfg.weight))


def matching_loss(cfg: DivergenceConfig, source_features: Tensor, target_features: Tensor,
                  kde_source: KdeModel | None = None, kde_target: KdeModel | None = None,
                  mmd_sigma: float | None = None) -> Tensor | None:
    """The configured D[p_s, p_t] for one step's flattened batch features."""
    kind = cfg.kind
    if kind is DivergenceKind.NONE:
        return None
    if kind in (DivergenceKind.JSD, DivergenceKind.KL):
        if kde_source is None or kde_target is None:
            raise UsageError(f"{kind.value} needs both KDE banks")
        support = shared_support(source_features, target_features)
        p_s = kde_to_discrete(kde_source, support)
        p_t = kde_to_discrete(kde_target, support)
        return jsd(p_s, p_t) if kind is DivergenceKind.JSD else kl(p_s, p_t)
    if kind is DivergenceKind.MMD_C:
        return mmd2(source_features, target_features, cfg.mmd_constant_sigma)
    if mmd_sigma is None:
        raise UsageError("MMD-B needs an estimated bandwidth")
    return mmd2(source_features, target_features, mmd_sigma)
