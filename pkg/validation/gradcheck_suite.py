"""
Gradient-check suite — every differentiable op against central differences.

Each entry builds fresh random inputs per case and reduces the op's output
to a scalar with fixed random weights (so every output entry matters). Ops
with kinks (relu, max, pool) get inputs kept well away from them.
"""

import logging
import math
import time
from typing import Callable

import numpy as np

from engine import autograd as ag
from engine.autograd.gradcheck import GradcheckResult, check_gradients
from engine.density import build_kde, log_density
from engine.divergence import DiscreteDist, dice_loss, jsd, kde_to_discrete, kl, mmd2, segmentation_loss

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
PIPELINE_TOLERANCE = 1e-3

Case = tuple[Callable[[list[ag.Tensor]], ag.Tensor], list[np.ndarray]]
CaseMaker = Callable[[np.random.Generator], Case]


def _weighted(rng: np.random.Generator, shape) -> Callable[[ag.Tensor], ag.Tensor]:
    weights = _away_from_zero(rng, *shape)
    return lambda out: ag.sum_(ag.mul(out, weights))


def _u(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def _away_from_zero(rng, *shape, gap=0.2):
    return rng.uniform(gap, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, *shape):
    """Values on a 0.1 grid, all different, so max/argmax never ties under ±eps."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 - 0.05 * n).reshape(shape)


def _unary(op):
    def make(rng):
        x = _u(rng, 3, 4)
        if op is ag.log:
            x = rng.uniform(0.2, 2.0, size=(3, 4))
        elif op is ag.relu:
            x = _away_from_zero(rng, 3, 4)
        reduce = _weighted(rng, (3, 4))
        return (lambda t: reduce(op(t[0]))), [x]
    return make


def _binary(op):
    def make(rng):
        a, b = _u(rng, 3, 4), _u(rng, 3, 4)
        if op is ag.div:
            b = _away_from_zero(rng, 3, 4, gap=0.5)
        reduce = _weighted(rng, (3, 4))
        return (lambda t: reduce(op(t[0], t[1]))), [a, b]
    return make


def _scalar_broadcast(rng):
    a, s = _u(rng, 2, 3), _u(rng)
    reduce = _weighted(rng, (2, 3))
    return (lambda t: reduce(ag.mul(ag.add(t[0], t[1]), t[1]))), [a, np.asarray(s)]


def _reduction(kind):
    def make(rng):
        x = _distinct(rng, 3, 4) if kind == "max" else _u(rng, 3, 4)
        reduce = _weighted(rng, (3,))
        return (lambda t: reduce(ag.reduce(kind, t[0], axes=1))), [x]
    return make


def _matmul(rng):
    a, b = _u(rng, 2, 3), _u(rng, 3, 4)
    reduce = _weighted(rng, (2, 4))
    return (lambda t: reduce(ag.matmul(t[0], t[1]))), [a, b]


def _conv(stride, padding):
    def make(rng):
        x, k, bias = _u(rng, 1, 2, 5, 5), _u(rng, 3, 2, 3, 3), _u(rng, 3)
        out = (5 + 2 * padding - 3) // stride + 1
        reduce = _weighted(rng, (1, 3, out, out))
        return (lambda t: reduce(ag.conv2d(t[0], t[1], t[2], stride=stride, padding=padding))), [x, k, bias]
    return make


def _pool(rng):
    x = _distinct(rng, 1, 2, 4, 4)
    reduce = _weighted(rng, (1, 2, 2, 2))
    return (lambda t: reduce(ag.max_pool2d(t[0]))), [x]


def _upsample(rng):
    x = _u(rng, 1, 2, 2, 2)
    reduce = _weighted(rng, (1, 2, 4, 4))
    return (lambda t: reduce(ag.upsample2d(t[0]))), [x]


def _shape_ops(rng):
    a, b, c = _u(rng, 2, 3), _u(rng, 1, 3), _u(rng, 2, 3)
    reduce = _weighted(rng, (3, 4))

    def fn(t):
        grown = ag.expand(t[1], (2, 3))
        joined = ag.concat([ag.mul(t[0], grown), t[2]], axis=0)            # [4, 3]
        return reduce(ag.transpose(joined, (1, 0)))                          # [3, 4]
    return fn, [a, b, c]


def _reshape(rng):
    x = _u(rng, 2, 6)
    reduce = _weighted(rng, (3, 4))
    return (lambda t: reduce(ag.reshape(t[0], (3, 4)))), [x]


def _masked_fill(rng):
    x = _u(rng, 3, 4)
    mask = rng.random((3, 4)) < 0.4
    reduce = _weighted(rng, (3, 4))
    return (lambda t: reduce(ag.masked_fill(t[0], mask, -1.5))), [x]


def _pairwise(rng):
    q, x = _u(rng, 3, 2), _u(rng, 4, 2)
    reduce = _weighted(rng, (3, 4))
    return (lambda t: reduce(ag.pairwise_sqdist(t[0], t[1]))), [q, x]


def _log_softmax(rng):
    x = _u(rng, 3, 4)
    reduce = _weighted(rng, (3, 4))
    return (lambda t: reduce(ag.log_softmax(t[0], axis=1))), [x]


def _log_density(rng):
    d = int(rng.integers(1, 5))
    samples, queries = _u(rng, 4, d), _u(rng, 3, d)
    sigma = float(rng.uniform(0.5, 1.5))
    reduce = _weighted(rng, (3,))
    return (lambda t: reduce(log_density(build_kde(t[0], sigma), t[1]))), [samples, queries]


def _kde_to_discrete(rng):
    samples, points = _u(rng, 4, 2), _u(rng, 5, 2)
    reduce = _weighted(rng, (5,))
    return (lambda t: reduce(kde_to_discrete(build_kde(t[0], 1.0), t[1]).log_probs)), [samples, points]


def _dist(t: ag.Tensor) -> DiscreteDist:
    return DiscreteDist(ag.log_softmax(t, axis=0))


def _kl(rng):
    return (lambda t: kl(_dist(t[0]), _dist(t[1]))), [_u(rng, 5), _u(rng, 5)]


def _jsd(rng):
    return (lambda t: jsd(_dist(t[0]), _dist(t[1]))), [_u(rng, 5), _u(rng, 5)]


def _jsd_pipeline(rng):
    """jsd ∘ kde_to_discrete, differentiated w.r.t. both feature sets."""
    src, tgt = _u(rng, 4, 2), _u(rng, 4, 2) + 0.5

    def fn(t):
        support = ag.concat([t[0], t[1]], axis=0)
        p_s = kde_to_discrete(build_kde(t[0].detach(), 0.8), support)
        p_t = kde_to_discrete(build_kde(t[1], 1.1), support)
        return jsd(p_s, p_t)
    return fn, [src, tgt]


def _mmd(rng):
    sigma = float(rng.uniform(0.5, 2.0))
    return (lambda t: mmd2(t[0], t[1], sigma)), [_u(rng, 3, 2), _u(rng, 4, 2)]


def _seg_loss(rng):
    labels = rng.integers(0, 3, size=(1, 2, 2))
    return (lambda t: segmentation_loss(t[0], labels)), [_u(rng, 1, 3, 2, 2)]


def _dice_loss(rng):
    labels = rng.integers(0, 2, size=(2, 3, 3))
    return (lambda t: dice_loss(t[0], labels)), [_u(rng, 2, 2, 3, 3)]


SUITE: dict[str, tuple[CaseMaker, float]] = {
    **{name: (_binary(op), TOLERANCE) for name, op in
       [("add", ag.add), ("sub", ag.sub), ("mul", ag.mul), ("div", ag.div)]},
    **{name: (_unary(op), TOLERANCE) for name, op in
       [("exp", ag.exp), ("log", ag.log), ("relu", ag.relu), ("sigmoid", ag.sigmoid),
        ("negate", ag.negate), ("square", ag.square)]},
    "scalar_broadcast": (_scalar_broadcast, TOLERANCE),
    **{name: (_reduction(name), TOLERANCE) for name in ("sum", "mean", "max", "logsumexp")},
    "matmul": (_matmul, TOLERANCE),
    "conv2d": (_conv(1, 1), TOLERANCE),
    "conv2d_strided": (_conv(2, 0), TOLERANCE),
    "max_pool2d": (_pool, TOLERANCE),
    "upsample2d": (_upsample, TOLERANCE),
    "reshape": (_reshape, TOLERANCE),
    "expand_concat_transpose": (_shape_ops, TOLERANCE),
    "masked_fill": (_masked_fill, TOLERANCE),
    "pairwise_sqdist": (_pairwise, TOLERANCE),
    "log_softmax": (_log_softmax, TOLERANCE),
    "log_density": (_log_density, TOLERANCE),
    "kde_to_discrete": (_kde_to_discrete, TOLERANCE),
    "kl": (_kl, TOLERANCE),
    "jsd": (_jsd, TOLERANCE),
    "jsd_kde_pipeline": (_jsd_pipeline, PIPELINE_TOLERANCE),
    "mmd2": (_mmd, TOLERANCE),
    "segmentation_loss": (_seg_loss, TOLERANCE),
    "dice_loss": (_dice_loss, TOLERANCE),
}


def check_op(name: str, cases: int = 20, seed: int = 0) -> GradcheckResult:
    make, tolerance = SUITE[name]
    rng = np.random.default_rng(np.random.SeedSequence([seed, sum(map(ord, name))]))
    worst = 0.0
    for _ in range(cases):
        fn, arrays = make(rng)
        err = check_gradients(fn, arrays)
        worst = err if math.isnan(err) else max(worst, err)
        if math.isnan(worst):
            break
    return GradcheckResult(name, worst, tolerance, cases)


def run_suite(cases: int = 20, seed: int = 0, only: list[str] | None = None) -> list[GradcheckResult]:
    names = only or list(SUITE)
    start = time.perf_counter()
    results = []
    for name in names:
        result = check_op(name, cases, seed)
        status = "ok" if result.passed else "FAIL"
        logger.info(f"[GRADCHECK] {name:<24} max rel err {result.max_rel_error:.2e} (< {result.tolerance:g}) {status}")
        results.append(result)
    logger.info(f"[GRADCHECK] {len(results)} ops × {cases} cases in {time.perf_counter() - start:.1f}s")
    return results
