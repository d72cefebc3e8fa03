"""
Configuration models. Every knob an experiment has, validated in one place.

Three layers, smallest first:
  UNetConfig        the network geometry (depth, widths, input size)
  DivergenceConfig  which density-matching loss and how much weight (λ)
  ExperimentConfig  everything the trainer needs: both of the above plus the
                    KDE schedule, optimizer, splits and seeds

On disk, a config is a flat `key = value` text file (see CONFIG_KEYS). Keys
not in the file come from a named preset, then from the model defaults.
"""

from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from engine.errors import DataIOError, UsageError


class DivergenceKind(str, Enum):
    JSD = "jsd"
    MMD_C = "mmd-c"
    MMD_B = "mmd-b"
    KL = "kl"
    NONE = "none"


class BandwidthMode(str, Enum):
    MEAN_NN_DISTANCE = "mean-nn-distance"   # mean of NN distances (default)
    MEAN_NN_SQUARED = "mean-nn-squared"     # mean of squared NN distances


class UNetConfig(BaseModel):
    """U-Net geometry. Channels at level ℓ are min(base·2^ℓ, max_channels)."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    depth: int = Field(3, ge=1, le=5)
    base_channels: int = Field(16, ge=1)
    in_channels: int = Field(1, ge=1)
    num_classes: int = Field(2, ge=2)
    input_size: int = Field(64, ge=2)
    max_channels: int = Field(1024, ge=1)

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.max_channels)

    def spatial(self, level: int) -> int:
        return self.input_size // 2 ** level

    def tap_names(self) -> list[str]:
        """Encoder taps top-down, the bottleneck, then decoder taps bottom-up."""
        enc = [f"ENC{i}" for i in range(1, self.depth + 1)]
        dec = [f"DEC{i}" for i in range(self.depth, 0, -1)]
        return enc + ["DEEPEST"] + dec

    def tap_level(self, name: str) -> int:
        if name == "DEEPEST":
            return self.depth
        if name not in self.tap_names():
            raise UsageError(f"unknown feature tap '{name}' for depth {self.depth}")
        return int(name[3:]) - 1

    def tap_shape(self, name: str) -> tuple[int, int, int]:
        level = self.tap_level(name)
        size = self.spatial(level)
        return (self.channels(level), size, size)


class DivergenceConfig(BaseModel):
    """Which density-matching term to add to the segmentation loss, and its weight λ."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: DivergenceKind = DivergenceKind.JSD
    weight: float = Field(0.01, ge=0.0, allow_inf_nan=False)
    mmd_constant_sigma: float = Field(1.0, gt=0.0, allow_inf_nan=False)

    @property
    def label(self) -> str:
        return "No Adapt" if self.kind is DivergenceKind.NONE else self.kind.value.upper()


class ExperimentConfig(BaseModel):
    """Everything one training run needs (data comes separately)."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    unet: UNetConfig = UNetConfig()
    divergence: DivergenceConfig = DivergenceConfig()
    tap_name: str = "DEEPEST"
    kde_samples: int = Field(20, ge=2)
    bw_refresh_epochs: int = Field(5, ge=1)
    bw_mode: BandwidthMode = BandwidthMode.MEAN_NN_DISTANCE
    optimizer: str = "sgd"
    lr: float = Field(1e-4, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    batch_size: int = Field(10, ge=1)
    epochs: int = Field(200, ge=1)
    num_splits: int = Field(5, ge=1)
    seed: int = Field(0, ge=0)
    seeds: tuple[int, ...] | None = None
    target_fraction: float = Field(0.03, gt=0.0, le=1.0)
    val_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seg_loss: str = "ce"

    @field_validator("optimizer")
    @classmethod
    def _known_optimizer(cls, value: str) -> str:
        if value not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got '{value}'")
        return value

    @field_validator("seg_loss")
    @classmethod
    def _known_seg_loss(cls, value: str) -> str:
        if value not in ("ce", "dice"):
            raise ValueError(f"seg_loss must be 'ce' or 'dice', got '{value}'")
        return value

    @model_validator(mode="after")
    def _tap_fits_depth(self):
        if self.tap_name not in self.unet.tap_names():
            raise ValueError(f"tap '{self.tap_name}' doesn't exist at depth {self.unet.depth}")
        if self.seeds is not None and len(self.seeds) != self.num_splits:
            raise ValueError(f"{len(self.seeds)} seeds given for {self.num_splits} splits")
        return self

    def split_seeds(self) -> list[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return [self.seed + i for i in range(self.num_splits)]

    def with_changes(self, **changes) -> "ExperimentConfig":
        """Copy with some fields swapped (re-validated)."""
        data = self.model_dump()
        data.update(changes)
        return ExperimentConfig.model_validate(data)


# ─── FLAT KEY=VALUE FILES ───

# Fixed key set. Everything else in a config file is an error.
RUN_KEYS = ("preset", "source_manifest", "target_manifest", "output_dir")
CONFIG_KEYS = (
    "depth", "base_channels", "in_channels", "num_classes", "input_size", "max_channels",
    "divergence", "lambda", "mmd_sigma",
    "tap", "kde_samples", "bw_refresh_epochs", "bw_mode",
    "lr", "weight_decay", "momentum", "optimizer",
    "batch_size", "epochs", "num_splits", "seed",
    "target_fraction", "val_fraction", "seg_loss",
)

_UNET_KEYS = {
    "depth": "depth", "base_channels": "base_channels", "in_channels": "in_channels",
    "num_classes": "num_classes", "input_size": "input_size", "max_channels": "max_channels",
}
_DIVERGENCE_KEYS = {"divergence": "kind", "lambda": "weight", "mmd_sigma": "mmd_constant_sigma"}
_TOP_KEYS = {
    "tap": "tap_name", "kde_samples": "kde_samples", "bw_refresh_epochs": "bw_refresh_epochs",
    "bw_mode": "bw_mode", "lr": "lr", "weight_decay": "weight_decay", "momentum": "momentum",
    "optimizer": "optimizer", "batch_size": "batch_size", "epochs": "epochs",
    "num_splits": "num_splits", "seed": "seed", "target_fraction": "target_fraction",
    "val_fraction": "val_fraction", "seg_loss": "seg_loss",
}

# desk is the default preset. full keeps the plain-descent defaults.
PRESETS: dict[str, dict[str, str]] = {
    "smoke": {
        "depth": "2", "base_channels": "4", "input_size": "16",
        "epochs": "2", "num_splits": "2", "batch_size": "4",
        "kde_samples": "4", "bw_refresh_epochs": "1",
        "optimizer": "adam", "lr": "1e-3",
    },
    "desk": {
        "depth": "3", "base_channels": "16", "input_size": "64",
        "epochs": "200", "num_splits": "5", "batch_size": "10",
        "kde_samples": "20", "bw_refresh_epochs": "5", "lambda": "0.01",
        "optimizer": "adam", "lr": "1e-3", "target_fraction": "0.03",
    },
    "full": {
        "depth": "5", "base_channels": "64", "input_size": "256",
        "epochs": "1000", "num_splits": "5", "batch_size": "10",
        "kde_samples": "20", "bw_refresh_epochs": "5", "lambda": "0.01",
        "lr": "1e-4", "weight_decay": "1e-4",
    },
    "mri": {
        "depth": "3", "base_channels": "16", "input_size": "64",
        "epochs": "200", "num_splits": "5", "batch_size": "10",
        "kde_samples": "20", "bw_refresh_epochs": "5", "lambda": "0.001",
        "optimizer": "adam", "lr": "1e-3", "target_fraction": "0.03",
    },
}


class RunSpec(BaseModel):
    """A parsed config file: the experiment plus where its data and outputs live."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    config: ExperimentConfig
    preset: str = "desk"
    source_manifest: Path | None = None
    target_manifest: Path | None = None
    output_dir: Path | None = None


def parse_flat(text: str) -> dict[str, str]:
    """`key = value` lines → dict. Comments (#) and blank lines are skipped."""
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS and key not in RUN_KEYS:
            raise UsageError(f"unknown config key '{key}' (line {number})")
        values[key] = value
    return values


def config_from_flat(values: dict[str, str]) -> ExperimentConfig:
    """Build an ExperimentConfig from flat keys (no preset merging here)."""
    unknown = [k for k in values if k not in CONFIG_KEYS]
    if unknown:
        raise UsageError(f"unknown config key '{unknown[0]}'")
    unet = {_UNET_KEYS[k]: v for k, v in values.items() if k in _UNET_KEYS}
    divergence = {_DIVERGENCE_KEYS[k]: v for k, v in values.items() if k in _DIVERGENCE_KEYS}
    top = {_TOP_KEYS[k]: v for k, v in values.items() if k in _TOP_KEYS}
    try:
        return ExperimentConfig.model_validate(
            {"unet": unet, "divergence": divergence, **top}, strict=False
        )
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise UsageError(f"invalid value for {where}: {first['msg']}") from e


def config_to_flat(config: ExperimentConfig) -> dict[str, str]:
    """Inverse of config_from_flat; always emits the full CONFIG_KEYS set."""
    u, d = config.unet, config.divergence
    return {
        "depth": str(u.depth), "base_channels": str(u.base_channels),
        "in_channels": str(u.in_channels), "num_classes": str(u.num_classes),
        "input_size": str(u.input_size), "max_channels": str(u.max_channels),
        "divergence": d.kind.value, "lambda": repr(d.weight), "mmd_sigma": repr(d.mmd_constant_sigma),
        "tap": config.tap_name, "kde_samples": str(config.kde_samples),
        "bw_refresh_epochs": str(config.bw_refresh_epochs), "bw_mode": config.bw_mode.value,
        "lr": repr(config.lr), "weight_decay": repr(config.weight_decay),
        "momentum": repr(config.momentum), "optimizer": config.optimizer,
        "batch_size": str(config.batch_size), "epochs": str(config.epochs),
        "num_splits": str(config.num_splits), "seed": str(config.seed),
        "target_fraction": repr(config.target_fraction),
        "val_fraction": repr(config.val_fraction), "seg_loss": config.seg_loss,
    }


def preset_config(name: str, **overrides: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise UsageError(f"unknown preset '{name}' (have: {', '.join(PRESETS)})")
    return config_from_flat({**PRESETS[name], **overrides})


def load_run_spec(path: str | Path) -> RunSpec:
    """Read a flat config file, merge it over its preset, validate everything."""
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"config file not found: {path}")
    values = parse_flat(path.read_text())
    preset = values.pop("preset", "desk")
    run_values = {k: values.pop(k) for k in RUN_KEYS if k in values}
    if preset not in PRESETS:
        raise UsageError(f"unknown preset '{preset}' (have: {', '.join(PRESETS)})")
    config = config_from_flat({**PRESETS[preset], **values})
    return RunSpec(config=config, preset=preset, **run_values)
