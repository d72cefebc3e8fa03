import struct

import numpy as np
import pytest

from engine import segnet
from engine.config import UNetConfig
from engine.errors import CheckpointFormatError, MissingFileError
from warehouse.checkpoint import (
    MAGIC, decode_records, encode_records, load_model, model_records, read_records, read_sidecar, save_model,
    sidecar_path, write_records, write_sidecar,
)


@pytest.fixture
def model():
    return segnet.init(UNetConfig(depth=2, base_channels=2, input_size=8), seed=4)


class TestRecords:
    def test_layout(self):
        blob = encode_records({"w": np.array([[1.0, 2.0]])})
        assert blob.startswith(MAGIC)
        name_len = struct.unpack("<I", blob[5:9])[0]
        assert blob[9:9 + name_len] == b"w"
        rank = struct.unpack("<I", blob[10:14])[0]
        assert rank == 2
        assert struct.unpack("<2I", blob[14:22]) == (1, 2)
        assert struct.unpack("<2d", blob[22:]) == (1.0, 2.0)

    def test_scalars_and_order_survive(self, tmp_path):
        records = {"b": np.float64(3.5), "a": np.arange(6.0).reshape(2, 3)}
        write_records(tmp_path / "x.dmck", records)
        back = read_records(tmp_path / "x.dmck")
        assert list(back) == ["b", "a"]
        assert back["b"].shape == () and back["b"] == 3.5
        assert np.array_equal(back["a"], records["a"])

    def test_bad_magic(self):
        with pytest.raises(CheckpointFormatError):
            decode_records(b"NOPE!" + b"\x00" * 8)

    def test_truncated(self):
        blob = encode_records({"w": np.ones(4)})
        with pytest.raises(CheckpointFormatError):
            decode_records(blob[:-3])

    def test_duplicate_names(self):
        one = encode_records({"w": np.ones(1)})
        with pytest.raises(CheckpointFormatError):
            decode_records(one + one[len(MAGIC):])

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            read_records(tmp_path / "absent.dmck")


class TestModels:
    def test_save_load_is_bit_exact(self, tmp_path, model):
        save_model(model, tmp_path / "m.dmck")
        back = load_model(tmp_path / "m.dmck")
        assert back.config == model.config
        assert back.parameter_bytes() == model.parameter_bytes()

    def test_missing_parameter(self, tmp_path, model):
        records = model_records(model)
        del records["head.bias"]
        write_records(tmp_path / "m.dmck", records)
        with pytest.raises(CheckpointFormatError, match="head.bias"):
            load_model(tmp_path / "m.dmck")

    def test_wrong_shape(self, tmp_path, model):
        records = model_records(model)
        records["head.bias"] = np.zeros(5)
        write_records(tmp_path / "m.dmck", records)
        with pytest.raises(CheckpointFormatError):
            load_model(tmp_path / "m.dmck")

    def test_records_without_config(self, tmp_path):
        write_records(tmp_path / "m.dmck", {"w": np.ones(2)})
        with pytest.raises(CheckpointFormatError):
            load_model(tmp_path / "m.dmck")


class TestSidecar:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "split0.dmck"
        write_sidecar(path, {"depth": "2"}, {"epoch": 3})
        assert sidecar_path(path).name == "split0.dmck.json"
        assert read_sidecar(path) == {"config": {"depth": "2"}, "state": {"epoch": 3}}

    def test_missing(self, tmp_path):
        with pytest.raises(MissingFileError):
            read_sidecar(tmp_path / "split0.dmck")

    def test_malformed(self, tmp_path):
        path = tmp_path / "split0.dmck"
        sidecar_path(path).write_text('{"config": {}}')
        with pytest.raises(CheckpointFormatError):
            read_sidecar(path)
