"""ATKPT1 checkpoint container."""
import numpy as np
import pytest

from src.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from src.errors import FormatError
from src.tracker import DenseTracker

from conftest import small_model_config


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path, rng):
        model = DenseTracker(small_model_config(), rng)
        first = save_checkpoint(tmp_path / "a.atkpt", model, {"window": 4})
        state, config = load_checkpoint(first)
        second = save_checkpoint(tmp_path / "b.atkpt", state, config)
        assert first.read_bytes() == second.read_bytes()

    def test_loaded_model_matches(self, tmp_path, rng):
        model = DenseTracker(small_model_config(), rng)
        path = save_checkpoint(tmp_path / "m.atkpt", model)
        state, config = load_checkpoint(path)
        assert config is None
        other = DenseTracker(small_model_config(), np.random.default_rng(5))
        other.load_state_dict(state)
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(other.state_dict()[name], value)

    def test_header_layout(self):
        raw = encode_checkpoint({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        assert raw.startswith(MAGIC)
        length = int.from_bytes(raw[len(MAGIC):len(MAGIC) + 8], "little")
        assert len(raw) == len(MAGIC) + 8 + length + 24
        state, _ = decode_checkpoint(raw)
        np.testing.assert_array_equal(state["w"], np.arange(6).reshape(2, 3))

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_checkpoint(b"NOTCKPT" + b"\x00" * 16)

    def test_truncated_payload(self):
        raw = encode_checkpoint({"w": np.ones(10, dtype=np.float32)})
        with pytest.raises(FormatError):
            decode_checkpoint(raw[:-4])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "absent.atkpt")
