"""
SegNet — a plain U-Net with named feature taps.

Layout for depth D (each "block" = two 3×3 conv + ReLU):

    input ─ ENC1 ──────────────────────────────── DEC1 ─ 1×1 conv ─ logits
              └ pool ─ ENC2 ──────────────── DEC2 ┘
                        └ pool ─ … ─ DEEPEST ┘ (upsample + concat skip at each step)

Every ENCk / DEEPEST / DECk output is returned as a tap, so the density
matching loss can read features from any depth. No batch norm: the source
and target passes must produce features that are directly comparable.

Parameter count (c_ℓ = min(base·2^ℓ, max_channels), c_in = in_channels):

    encoder ℓ = 0..D-1 : 9·a_ℓ·c_ℓ + 9·c_ℓ² + 2·c_ℓ,   a_0 = c_in, a_ℓ = c_{ℓ-1}
    deepest            : 9·c_{D-1}·c_D + 9·c_D² + 2·c_D
    decoder ℓ = 0..D-1 : 9·(c_{ℓ+1} + c_ℓ)·c_ℓ + 9·c_ℓ² + 2·c_ℓ
    head               : c_0·num_classes + num_classes
"""

import numpy as np

from engine.autograd import Tensor, concat, conv2d, max_pool2d, relu, reshape, upsample2d
from engine.config import UNetConfig
from engine.errors import ShapeError, UsageError


class UNetModel:
    """Named parameters + the config that shaped them."""

    def __init__(self, config: UNetConfig, parameters: dict[str, Tensor]):
        self.config = config
        self.parameters = parameters

    def __call__(self, batch: Tensor, stop_at: str | None = None):
        return forward(self, batch, stop_at=stop_at)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.parameters.items())

    def zero_grad(self):
        for p in self.parameters.values():
            p.zero_grad()

    def parameter_bytes(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self.parameters.values())

    def clone(self) -> "UNetModel":
        return UNetModel(
            self.config,
            {name: Tensor(p.data, requires_grad=True) for name, p in self.parameters.items()},
        )


# ─── INIT ───

def _block_shapes(prefix: str, cin: int, cout: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.conv1.weight", (cout, cin, 3, 3)),
        (f"{prefix}.conv1.bias", (cout,)),
        (f"{prefix}.conv2.weight", (cout, cout, 3, 3)),
        (f"{prefix}.conv2.bias", (cout,)),
    ]


def parameter_shapes(config: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter name and shape, in a fixed order."""
    shapes = []
    cin = config.in_channels
    for level in range(config.depth):
        shapes += _block_shapes(f"enc{level + 1}", cin, config.channels(level))
        cin = config.channels(level)
    shapes += _block_shapes("deepest", cin, config.channels(config.depth))
    for level in range(config.depth - 1, -1, -1):
        below = config.channels(level + 1)
        shapes += _block_shapes(f"dec{level + 1}", below + config.channels(level), config.channels(level))
    shapes += [
        ("head.weight", (config.num_classes, config.channels(0), 1, 1)),
        ("head.bias", (config.num_classes,)),
    ]
    return shapes


def parameter_count(config: UNetConfig) -> int:
    """Closed form from the module docstring."""
    c = [config.channels(level) for level in range(config.depth + 1)]
    total = 0
    incoming = config.in_channels
    for level in range(config.depth):
        total += 9 * incoming * c[level] + 9 * c[level] ** 2 + 2 * c[level]
        incoming = c[level]
    total += 9 * c[config.depth - 1] * c[config.depth] + 9 * c[config.depth] ** 2 + 2 * c[config.depth]
    for level in range(config.depth):
        total += 9 * (c[level + 1] + c[level]) * c[level] + 9 * c[level] ** 2 + 2 * c[level]
    total += c[0] * config.num_classes + config.num_classes
    return total


def check_geometry(config: UNetConfig):
    size = config.input_size
    if size & (size - 1):
        raise ShapeError(f"input_size {size} is not a power of two")
    if size % 2 ** config.depth:
        raise ShapeError(f"input_size {size} is not divisible by 2^{config.depth}")


def init(config: UNetConfig, seed: int = 0) -> UNetModel:
    """Gaussian kernels with std sqrt(2 / fan_in), zero biases. Same seed → same bytes."""
    check_geometry(config)
    rng = np.random.default_rng(seed)
    parameters = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        parameters[name] = Tensor(values, requires_grad=True)
    return UNetModel(config, parameters)


# ─── FORWARD ───

def _block(model: UNetModel, prefix: str, x: Tensor) -> Tensor:
    p = model.parameters
    x = relu(conv2d(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], padding=1))
    return relu(conv2d(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], padding=1))


def forward(model: UNetModel, batch: Tensor, stop_at: str | None = None):
    """
    batch [B, in_channels, H, W] → (logits [B, num_classes, H, W], taps)

    With stop_at set, returns (None, taps) as soon as that tap exists.
    """
    cfg = model.config
    if stop_at is not None and stop_at not in cfg.tap_names():
        raise UsageError(f"unknown feature tap '{stop_at}'")
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected [B, {cfg.in_channels}, H, W] batch, got {list(batch.shape)}")
    if batch.shape[2] != cfg.input_size or batch.shape[3] != cfg.input_size:
        raise ShapeError(
            f"batch is {batch.shape[2]}×{batch.shape[3]}, model expects {cfg.input_size}×{cfg.input_size}"
        )

    taps: dict[str, Tensor] = {}
    skips = []
    x = batch
    for level in range(cfg.depth):
        x = _block(model, f"enc{level + 1}", x)
        taps[f"ENC{level + 1}"] = x
        if stop_at == f"ENC{level + 1}":
            return None, taps
        skips.append(x)
        x = max_pool2d(x)

    x = _block(model, "deepest", x)
    taps["DEEPEST"] = x
    if stop_at == "DEEPEST":
        return None, taps

    for level in range(cfg.depth - 1, -1, -1):
        x = concat([upsample2d(x), skips[level]], axis=1)
        x = _block(model, f"dec{level + 1}", x)
        taps[f"DEC{level + 1}"] = x
        if stop_at == f"DEC{level + 1}":
            return None, taps

    p = model.parameters
    logits = conv2d(x, p["head.weight"], p["head.bias"])
    return logits, taps


def flatten_tap(taps: dict[str, Tensor], name: str) -> Tensor:
    """[B, C, h, w] tap → [B, C·h·w], row-major per sample."""
    if name not in taps:
        raise UsageError(f"unknown feature tap '{name}' (have: {', '.join(taps)})")
    tap = taps[name]
    return reshape(tap, (tap.shape[0], int(np.prod(tap.shape[1:]))))
