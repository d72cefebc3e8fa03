"""
Synthetic gland-like scenes with a tunable, seeded domain shift.

Each scene is a grey background with a few soft-edged ellipses ("blobs") whose
intensity drifts across them, so boundaries are genuinely ambiguous. The mask
is fixed the moment the blobs are placed. A DomainShiftSpec then changes only
low-level pixel statistics, in this order:

    blur → gain/offset → sinusoidal texture → Gaussian noise → clamp to [0, 1]

Shifts never touch masks: the target domain is the same anatomy seen through a
different "scanner". Every step that would be a no-op is skipped, so the
identity shift reproduces the clean image bit-for-bit.

Per-image randomness comes from SeedSequence([scene seed, index]), split into
a scene stream (geometry) and a noise stream, so any shift of the same scene
seed yields the same masks.
"""

import logging
import math
from dataclasses import asdict, dataclass, replace

import cv2
import numpy as np

from engine.errors import InfeasibleSceneError, UsageError
from sources.base_source import BaseSource
from sources.dataset import Dataset

logger = logging.getLogger(__name__)


# ─── SPECS ───

@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_blobs: tuple[int, int] = (2, 5)        # inclusive range
    radius: tuple[float, float] = (5.0, 12.0)  # ellipse semi-axis range, pixels
    foreground: float = 0.65
    background: float = 0.25
    gradient: float = 0.15                     # intensity drift across a blob
    edge_softness: float = 1.5                 # pixels
    seed: int = 0

    def check(self):
        lo_n, hi_n = self.num_blobs
        lo_r, hi_r = self.radius
        if self.image_size < 4:
            raise InfeasibleSceneError(f"image_size {self.image_size} is too small")
        if not 1 <= lo_n <= hi_n:
            raise UsageError(f"num_blobs range {self.num_blobs} is invalid")
        if not 0 < lo_r <= hi_r:
            raise UsageError(f"radius range {self.radius} is invalid")
        if 2 * hi_r > self.image_size:
            raise InfeasibleSceneError(
                f"blob radius up to {hi_r} can't fit inside a {self.image_size}×{self.image_size} image"
            )
        if not (0.0 <= self.background <= 1.0 and 0.0 <= self.foreground <= 1.0):
            raise UsageError("base intensities must lie in [0, 1]")


@dataclass(frozen=True)
class DomainShiftSpec:
    intensity_gain: float = 1.0
    intensity_offset: float = 0.0
    noise_std: float = 0.0
    blur_radius: int = 0          # box-blur half-width
    texture_freq: float = 0.0     # cycles per pixel
    texture_amp: float = 0.0
    texture_angle: float = 0.0    # radians

    @property
    def is_identity(self) -> bool:
        return (self.intensity_gain == 1.0 and self.intensity_offset == 0.0 and self.noise_std == 0.0
                and self.blur_radius == 0 and self.texture_amp == 0.0)


IDENTITY = DomainShiftSpec()

SHIFT_PRESETS: dict[str, DomainShiftSpec] = {
    "identity": IDENTITY,
    # The desk target domain: darker, compressed contrast, strong striping
    "texture": DomainShiftSpec(intensity_gain=0.55, intensity_offset=0.3, noise_std=0.04,
                               blur_radius=0, texture_freq=0.18, texture_amp=0.18,
                               texture_angle=0.6),
    "scanner": DomainShiftSpec(intensity_gain=1.3, intensity_offset=-0.05, blur_radius=2),
    "noisy": DomainShiftSpec(noise_std=0.1),
}


def shift_preset(name: str) -> DomainShiftSpec:
    if name not in SHIFT_PRESETS:
        raise UsageError(f"unknown shift preset '{name}' (have: {', '.join(SHIFT_PRESETS)})")
    return SHIFT_PRESETS[name]


def site_shift(site: int) -> DomainShiftSpec:
    """A fixed, reproducible shift per imaging site. Site 0 is the unshifted reference."""
    if site < 0:
        raise UsageError(f"site index must be ≥ 0, got {site}")
    if site == 0:
        return IDENTITY
    rng = np.random.default_rng(np.random.SeedSequence([0x517E, site]))
    return DomainShiftSpec(
        intensity_gain=float(rng.uniform(0.5, 1.4)),
        intensity_offset=float(rng.uniform(-0.1, 0.3)),
        noise_std=float(rng.uniform(0.0, 0.06)),
        blur_radius=int(rng.integers(0, 3)),
        texture_freq=float(rng.uniform(0.05, 0.3)),
        texture_amp=float(rng.uniform(0.0, 0.2)),
        texture_angle=float(rng.uniform(0.0, math.pi)),
    )


# ─── RENDERING ───

def foreground_bounds(scene: SceneSpec) -> tuple[float, float]:
    """
    Bounds on the foreground pixel fraction any scene from this spec can have.
    Lower: one smallest blob. Upper: every blob at the largest size, no overlap.
    Both allow one pixel of rasterization slack on each semi-axis.
    """
    area = scene.image_size ** 2
    lo_r, hi_r = scene.radius
    lower = math.pi * max(lo_r - 1.0, 0.0) ** 2 / area
    upper = min(1.0, scene.num_blobs[1] * math.pi * (hi_r + 1.0) ** 2 / area)
    return lower, upper


def render_scene(scene: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One clean (image [H, W] float, mask [H, W] uint8) pair."""
    size = scene.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    coverage = np.zeros((size, size))
    tone = np.full((size, size), scene.foreground)
    mask = np.zeros((size, size), dtype=np.uint8)

    for _ in range(int(rng.integers(scene.num_blobs[0], scene.num_blobs[1] + 1))):
        a, b = rng.uniform(scene.radius[0], scene.radius[1], size=2)
        reach = max(a, b)
        cy, cx = rng.uniform(reach, size - reach, size=2)
        theta = rng.uniform(0.0, math.pi)
        drift = rng.uniform(0.0, 2 * math.pi)

        u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
        v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)

        inside = rho <= 1.0
        mask[inside] = 1
        weight = 0.5 * (1.0 + np.tanh((1.0 - rho) * min(a, b) / (2.0 * scene.edge_softness)))
        local = scene.foreground + scene.gradient * (
            (u / a) * math.cos(drift) + (v / b) * math.sin(drift)
        )
        stronger = weight > coverage
        tone = np.where(stronger, local, tone)
        coverage = np.maximum(coverage, weight)

    image = scene.background + coverage * (tone - scene.background)
    return np.clip(image, 0.0, 1.0), mask


def apply_shift(image: np.ndarray, shift: DomainShiftSpec, rng: np.random.Generator | None = None,
                clamp: bool = True) -> np.ndarray:
    """Shift one [H, W] image. With clamp=False the clamp step is left out."""
    out = np.asarray(image, dtype=np.float64)
    if shift.blur_radius > 0:
        k = 2 * shift.blur_radius + 1
        out = cv2.blur(out, (k, k), borderType=cv2.BORDER_REFLECT)
    if shift.intensity_gain != 1.0 or shift.intensity_offset != 0.0:
        out = out * shift.intensity_gain + shift.intensity_offset
    if shift.texture_amp != 0.0:
        yy, xx = np.mgrid[0:out.shape[0], 0:out.shape[1]].astype(np.float64)
        phase = xx * math.cos(shift.texture_angle) + yy * math.sin(shift.texture_angle)
        out = out + shift.texture_amp * np.sin(2 * math.pi * shift.texture_freq * phase)
    if shift.noise_std > 0.0:
        if rng is None:
            raise UsageError("a noisy shift needs a random generator")
        out = out + rng.normal(0.0, shift.noise_std, size=out.shape)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def _item_streams(seed: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    scene_seq, noise_seq = np.random.SeedSequence([seed, index]).spawn(2)
    return np.random.default_rng(scene_seq), np.random.default_rng(noise_seq)


def generate(scene: SceneSpec, shift: DomainShiftSpec, count: int, domain_tag: str = "source") -> Dataset:
    """count scenes rendered from scene.seed and shifted. Masks come from the clean scene."""
    if count < 1:
        raise UsageError(f"count must be ≥ 1, got {count}")
    scene.check()
    images, masks, manifest = [], [], []
    for index in range(count):
        scene_rng, noise_rng = _item_streams(scene.seed, index)
        clean, mask = render_scene(scene, scene_rng)
        images.append(apply_shift(clean, shift, noise_rng)[None, :, :])
        masks.append(mask)
        manifest.append({"index": index, "seed": scene.seed, "scene": asdict(scene), "shift": asdict(shift)})
    return Dataset(images, masks, domain_tag, manifest, num_classes=2)


# ─── CACHED SOURCE ───

class SyntheticSource(BaseSource):
    """generate() behind the on-disk cache."""

    def __init__(self, cache_dir=None):
        super().__init__("synthetic", cache_dir)

    def _build(self, scene: dict, shift: dict, count: int, domain_tag: str) -> Dataset:
        logger.info(f"[DATA] rendering {count} {domain_tag} scenes (seed {scene['seed']})")
        return generate(SceneSpec(**scene), DomainShiftSpec(**shift), count, domain_tag)

    def fetch(self, scene: SceneSpec, shift: DomainShiftSpec, count: int, domain_tag: str = "source",
              use_cache: bool = True) -> Dataset:
        return self.load(use_cache=use_cache, scene=asdict(scene), shift=asdict(shift),
                         count=count, domain_tag=domain_tag)


def desk_domains(source_count: int = 200, target_count: int = 100, image_size: int = 64,
                 seed: int = 0, target_shift: str = "texture",
                 source: SyntheticSource | None = None) -> tuple[Dataset, Dataset]:
    """The standard source/target pair: identity-shifted source, shifted target, disjoint seeds."""
    base = SceneSpec(image_size=image_size, seed=seed)
    if image_size < 64:
        scale = image_size / 64
        base = replace(base, radius=(max(1.5, 5.0 * scale), max(2.0, 12.0 * scale)))
    make = source.fetch if source is not None else (lambda s, sh, n, tag: generate(s, sh, n, tag))
    src = make(base, IDENTITY, source_count, "source")
    tgt = make(replace(base, seed=seed + 1_000_003), shift_preset(target_shift), target_count, "target")
    return src, tgt
