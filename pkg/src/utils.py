"""Utility functions for the dense tracker: paths and image I/O."""

import os
import sys
from datetime import datetime
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

IMAGE_SUFFIXES = (".png",)


def get_timestamp():
    """Get current timestamp in YYYYMMDD_HHMM format."""
    return datetime.now().strftime("%Y%m%d_%H%M")


def get_base_path():
    """Get the base path of the application.

    Handles both normal Python execution and a frozen executable.
    """
    if getattr(sys, 'frozen', False):
        return os.path.dirname(sys.executable)
    else:
        return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def get_output_folder():
    """Get the Output folder path."""
    return os.path.join(get_base_path(), "Output")


def get_config_path():
    """Get the config.json file path."""
    return os.path.join(get_base_path(), "config.json")


def ensure_output_folder(folder=None):
    """Ensure the output folder exists."""
    output_folder = folder or get_output_folder()
    if not os.path.exists(output_folder):
        os.makedirs(output_folder)
    return output_folder


def generate_output_filename(prefix, step, suffix=".atkpt"):
    """Generate a checkpoint filename.

    Format: {prefix}_{step:06d}{suffix}
    """
    return f"{prefix}_{int(step):06d}{suffix}"


def generate_run_name(prefix="run"):
    """Format: {prefix}_{YYYYMMDD}_{HHMM}"""
    return f"{prefix}_{get_timestamp()}"


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def list_frames(folder):
    """PNG files in ``folder``, sorted lexicographically."""
    folder = Path(folder)
    if not folder.is_dir():
        raise FormatError(f"Frame directory not found: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_frames(folder):
    """Read a directory of same-sized PNG frames into ``[T, 3, H, W]`` floats in [0, 1]."""
    paths = list_frames(folder)
    if not paths:
        raise FormatError(f"No PNG frames in {folder}")
    frames = []
    for path in paths:
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as e:
            raise FormatError(f"Failed to read frame {path}: {e}")
        if frames and arr.shape != frames[0].shape:
            raise FormatError(f"Frame {path.name} is {arr.shape[:2]}, expected {frames[0].shape[:2]}")
        frames.append(arr)
    return np.stack(frames).transpose(0, 3, 1, 2).copy()


def save_frame(path, frame):
    """Write a ``[3, H, W]`` float frame in [0, 1] as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.round(np.transpose(frame, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb).save(path)
    return path


def save_gray(path, values):
    """Write an ``[H, W]`` map in [0, 1] as an 8-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)).save(path)
    return path


def parse_resolution(text):
    """``"384x512"`` -> (384, 512)."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"resolution must look like HxW, got {text!r}")
    if h <= 0 or w <= 0:
        raise ValueError(f"resolution must be positive, got {text!r}")
    return h, w


def _resize_plane(plane, size):
    h, w = size
    img = Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32))
    return np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float32)


def resize_frames(frames, size):
    """Bilinearly resize ``[T, 3, H, W]`` frames to ``size = (h, w)``."""
    t, c = frames.shape[:2]
    out = np.empty((t, c) + tuple(size), dtype=np.float32)
    for i in range(t):
        for ch in range(c):
            out[i, ch] = _resize_plane(frames[i, ch], size)
    return out


def resize_output(result, size):
    """Map a ``[T, h, w, 4]`` result back to ``size``; flow scales with the size ratio."""
    t, h, w, _ = result.shape
    out = np.empty((t,) + tuple(size) + (4,), dtype=np.float32)
    sx, sy = size[1] / w, size[0] / h
    for i in range(t):
        for ch, scale in enumerate((sx, sy, 1.0, 1.0)):
            out[i, ..., ch] = _resize_plane(result[i, ..., ch], size) * scale
    out[..., 2:] = np.clip(out[..., 2:], 0.0, 1.0)
    return out
