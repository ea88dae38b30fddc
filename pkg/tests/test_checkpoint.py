import struct

import numpy as np
import pytest

from src.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from src.errors import CheckpointError, MissingArtifactError
from src.rng import Rng


@pytest.fixture
def tensors():
    rng = Rng(3)
    return {
        "encoder.layers.0.attn.w_q": rng.normal(0, 1, (4, 4)),
        "encoder.pooler.bias": rng.normal(0, 1, (4,)),
        "scale": np.array(2.5),
    }


class TestCheckpoint:
    def test_round_trip_at_f32(self, tmp_path, tensors):
        config = {"style": "endovis", "patches": 2, "cnn_widths": [8, 16, 16]}
        path = save_checkpoint(tmp_path / "run" / "model.ckpt", config, tensors)
        loaded_config, loaded = load_checkpoint(path)
        assert loaded_config == config
        assert list(loaded) == list(tensors)
        for name, value in tensors.items():
            assert loaded[name].dtype == np.float64
            np.testing.assert_array_equal(loaded[name], value.astype(np.float32).astype(np.float64))

    def test_layout(self, tensors):
        raw = encode_checkpoint({}, {"w": np.ones((2, 3))})
        assert raw.startswith(MAGIC)
        assert struct.unpack("<I", raw[5:9])[0] == 1
        # magic, version, config "{}", count, name "w", rank 2, dims, 6 floats
        assert len(raw) == 5 + 4 + 4 + 2 + 4 + 4 + 1 + 4 + 8 + 24

    def test_deterministic_bytes(self, tensors):
        config = {"b": 1, "a": [1, 2]}
        assert encode_checkpoint(config, tensors) == encode_checkpoint(dict(reversed(config.items())), tensors)

    def test_no_temp_file_left(self, tmp_path, tensors):
        save_checkpoint(tmp_path / "model.ckpt", {}, tensors)
        assert [p.name for p in tmp_path.iterdir()] == ["model.ckpt"]

    def test_bad_magic(self, tensors):
        raw = encode_checkpoint({}, tensors)
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXXX" + raw[5:])

    def test_unknown_version(self, tensors):
        raw = bytearray(encode_checkpoint({}, tensors))
        raw[5:9] = struct.pack("<I", 7)
        with pytest.raises(CheckpointError, match="version 7"):
            decode_checkpoint(bytes(raw))

    def test_truncated(self, tensors):
        raw = encode_checkpoint({"style": "cholec"}, tensors)
        for cut in (3, 20, len(raw) - 1):
            with pytest.raises(CheckpointError, match="truncated"):
                decode_checkpoint(raw[:cut])

    def test_trailing_bytes(self, tensors):
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(encode_checkpoint({}, tensors) + b"\x00")

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError) as info:
            load_checkpoint(tmp_path / "absent.ckpt")
        assert info.value.artifact == "checkpoint"
        assert info.value.one_line().startswith("error: missing-artifact: checkpoint not found")
