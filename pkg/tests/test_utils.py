import numpy as np
import pytest

from src.errors import FormatError
from src.utils import (
    generate_output_filename, load_frames, parse_resolution, resize_frames, resize_output, save_frame,
)


class TestFrames:
    def test_save_then_load(self, tmp_path, rng):
        frames = np.round(rng.random((2, 3, 5, 6)) * 255) / 255
        for i, frame in enumerate(frames):
            save_frame(tmp_path / f"{i:03d}.png", frame)
        np.testing.assert_allclose(load_frames(tmp_path), frames, atol=1e-6)

    def test_sorted_lexicographically(self, tmp_path):
        save_frame(tmp_path / "b.png", np.ones((3, 2, 2)))
        save_frame(tmp_path / "a.png", np.zeros((3, 2, 2)))
        frames = load_frames(tmp_path)
        assert frames[0].max() == 0.0 and frames[1].min() == 1.0

    def test_mixed_sizes_rejected(self, tmp_path):
        save_frame(tmp_path / "a.png", np.zeros((3, 2, 2)))
        save_frame(tmp_path / "b.png", np.zeros((3, 3, 2)))
        with pytest.raises(FormatError, match="expected"):
            load_frames(tmp_path)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FormatError, match="No PNG"):
            load_frames(tmp_path)


class TestResolution:
    def test_parse(self):
        assert parse_resolution("384x512") == (384, 512)
        assert parse_resolution("64X96") == (64, 96)

    @pytest.mark.parametrize("text", ["384", "ax4", "0x8", "-8x8"])
    def test_bad(self, text):
        with pytest.raises(ValueError):
            parse_resolution(text)

    def test_resize_frames_shape(self, rng):
        assert resize_frames(rng.random((2, 3, 10, 12)), (5, 6)).shape == (2, 3, 5, 6)

    def test_resize_output_scales_flow(self):
        result = np.zeros((1, 4, 4, 4), np.float32)
        result[..., 0] = 1.0
        result[..., 1] = 2.0
        result[..., 2:] = 0.5
        out = resize_output(result, (8, 12))
        np.testing.assert_allclose(out[..., 0], 3.0, atol=1e-5)
        np.testing.assert_allclose(out[..., 1], 4.0, atol=1e-5)
        np.testing.assert_allclose(out[..., 2:], 0.5, atol=1e-5)


def test_output_filename():
    assert generate_output_filename("model", 10) == "model_000010.atkpt"
