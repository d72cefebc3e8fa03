"""
Train state — everything a training run carries from one step to the next,
and everything needed to pick it back up after a restart.

  Optimizer     the update rule plus its moment buffers
  TrainState    model + optimizer + epoch counters + KDE banks + RNG streams
  RunArtifacts  what fit() leaves behind on disk
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from engine.autograd import Tensor
from engine.density import KdeModel
from engine.errors import UsageError
from engine.segnet import UNetModel

# Independent random streams per split: source batch order, target batch
# order, KDE bank draws. Spawned from one SeedSequence so they never overlap.
RNG_STREAMS = ("order", "target", "kde")


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(RNG_STREAMS, children)}


def rng_states(rngs: dict[str, np.random.Generator]) -> dict:
    return {name: rng.bit_generator.state for name, rng in rngs.items()}


def rngs_from_states(states: dict) -> dict[str, np.random.Generator]:
    rngs = {}
    for name in RNG_STREAMS:
        rng = np.random.default_rng()
        rng.bit_generator.state = states[name]
        rngs[name] = rng
    return rngs


class Optimizer:
    """
    Plain descent ("sgd", optional momentum) or Adam, both with decoupled
    weight decay:  p ← p − lr·update(g) − lr·wd·p
    """

    def __init__(self, kind: str = "sgd", lr: float = 1e-4, weight_decay: float = 1e-4,
                 momentum: float = 0.0, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise UsageError(f"unknown optimizer '{kind}'")
        self.kind = kind
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, parameters: dict[str, Tensor]):
        self.steps += 1
        b1, b2 = self.betas
        for name, p in parameters.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.kind == "adam":
                m = self.m.get(name, np.zeros_like(g))
                v = self.v.get(name, np.zeros_like(g))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.m[name], self.v[name] = m, v
                m_hat = m / (1 - b1 ** self.steps)
                v_hat = v / (1 - b2 ** self.steps)
                update = m_hat / (np.sqrt(v_hat) + self.eps)
            elif self.momentum:
                update = self.momentum * self.m.get(name, np.zeros_like(g)) + g
                self.m[name] = update
            else:
                update = g
            new = p.data - self.lr * update
            if self.weight_decay:
                new = new - self.lr * self.weight_decay * p.data
            p.data = np.require(new, requirements="C")

    def moment_records(self) -> dict[str, np.ndarray]:
        records = {f"opt.m.{name}": m for name, m in self.m.items()}
        records.update({f"opt.v.{name}": v for name, v in self.v.items()})
        return records

    def load_moments(self, records: dict[str, np.ndarray], steps: int):
        self.steps = steps
        self.m = {k[len("opt.m."):]: v.copy() for k, v in records.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: v.copy() for k, v in records.items() if k.startswith("opt.v.")}


def grad_norm(parameters: dict[str, Tensor]) -> float:
    total = sum(float(np.sum(p.grad * p.grad)) for p in parameters.values() if p.grad is not None)
    return math.sqrt(total)


@dataclass
class TrainState:
    model: UNetModel
    optimizer: Optimizer
    rngs: dict[str, np.random.Generator]
    split: int = 0
    epoch: int = 0                         # epochs completed
    best_val_loss: float = math.inf
    best_epoch: int = -1
    kde_source: KdeModel | None = None
    kde_target: KdeModel | None = None
    mmd_sigma: float | None = None
    target_order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    target_pos: int = 0

    @property
    def sigma_src(self) -> float:
        return self.kde_source.bandwidth if self.kde_source is not None else math.nan

    @property
    def sigma_tgt(self) -> float:
        return self.kde_target.bandwidth if self.kde_target is not None else math.nan

    def next_target_indices(self, pool_size: int, count: int) -> np.ndarray:
        """Walk reshuffled permutations of the target pool, `count` at a time."""
        picked = []
        while len(picked) < count:
            if self.target_pos >= len(self.target_order):
                self.target_order = self.rngs["target"].permutation(pool_size)
                self.target_pos = 0
            take = min(count - len(picked), len(self.target_order) - self.target_pos)
            picked.extend(self.target_order[self.target_pos:self.target_pos + take].tolist())
            self.target_pos += take
        return np.asarray(picked, dtype=np.int64)


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoints: list[Path]
    metrics_csv: Path
    summary_csv: Path
    metrics: pd.DataFrame
    summary: pd.DataFrame
    split_seeds: list[int]
