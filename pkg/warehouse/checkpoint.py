"""
DMCK1 checkpoints — named float64 tensors in one flat binary file.

    b"DMCK1"
    repeated until end of file:
        u32  name length        (little-endian)
        ...  UTF-8 name
        u32  rank
        u32  extent × rank
        f8   payload × prod(extents)   (little-endian, row-major)

Model checkpoints start with a `unet.config` record (the UNetConfig fields as
floats) so a file is self-describing. Every checkpoint can carry a JSON
sidecar next to it (`<file>.json`) with the flat experiment config and the
training state that isn't a tensor (epoch, best val loss, RNG state, σ's).

Usage:
    save_model(model, "runs/x/checkpoints/split0.dmck")
    model = load_model("runs/x/checkpoints/split0.dmck")
"""

import json
import struct
from pathlib import Path

import numpy as np

from engine.autograd import Tensor
from engine.config import UNetConfig
from engine.errors import CheckpointFormatError, MissingFileError
from engine.segnet import UNetModel, parameter_shapes

MAGIC = b"DMCK1"
CONFIG_RECORD = "unet.config"
CONFIG_FIELDS = ("depth", "base_channels", "in_channels", "num_classes", "input_size", "max_channels")


# ─── RAW RECORDS ───

def encode_records(records: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, array in records.items():
        data = np.asarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes(order="C"))
    return b"".join(chunks)


def decode_records(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointFormatError(f"{source}: not a DMCK1 file (bad magic)")
    records: dict[str, np.ndarray] = {}
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"{source}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        payload = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        if name in records:
            raise CheckpointFormatError(f"{source}: duplicate record '{name}'")
        records[name] = payload.reshape(shape)
    return records


def write_records(path: str | Path, records: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_records(records))


def read_records(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    return decode_records(path.read_bytes(), str(path))


# ─── MODELS ───

def model_records(model: UNetModel) -> dict[str, np.ndarray]:
    cfg = model.config
    records = {CONFIG_RECORD: np.array([getattr(cfg, f) for f in CONFIG_FIELDS], dtype=np.float64)}
    records.update({name: p.data for name, p in model.parameters.items()})
    return records


def model_from_records(records: dict[str, np.ndarray], source: str = "<records>") -> UNetModel:
    if CONFIG_RECORD not in records:
        raise CheckpointFormatError(f"{source}: missing '{CONFIG_RECORD}' record")
    values = records[CONFIG_RECORD]
    if values.shape != (len(CONFIG_FIELDS),):
        raise CheckpointFormatError(f"{source}: '{CONFIG_RECORD}' has shape {list(values.shape)}")
    config = UNetConfig(**{f: int(v) for f, v in zip(CONFIG_FIELDS, values)})

    parameters = {}
    for name, shape in parameter_shapes(config):
        if name not in records:
            raise CheckpointFormatError(f"{source}: missing parameter '{name}'")
        if records[name].shape != shape:
            raise CheckpointFormatError(
                f"{source}: '{name}' has shape {list(records[name].shape)}, expected {list(shape)}"
            )
        parameters[name] = Tensor(records[name], requires_grad=True)
    return UNetModel(config, parameters)


def save_model(model: UNetModel, path: str | Path):
    write_records(path, model_records(model))


def load_model(path: str | Path) -> UNetModel:
    return model_from_records(read_records(path), str(path))


# ─── SIDECAR ───

def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_sidecar(path: str | Path, config: dict[str, str], state: dict):
    sidecar_path(path).write_text(json.dumps({"config": config, "state": state}, indent=2, sort_keys=True))


def read_sidecar(path: str | Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise MissingFileError(f"checkpoint sidecar not found: {side}")
    try:
        data = json.loads(side.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"{side}: {e}") from e
    if set(data) != {"config", "state"}:
        raise CheckpointFormatError(f"{side}: expected exactly 'config' and 'state' sections")
    return data
