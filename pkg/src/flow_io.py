"""Middlebury ``.flo`` files and color-wheel flow visualization."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

FLO_MAGIC = 202021.25
HEADER_BYTES = 12

# Hue segment lengths of the Middlebury wheel.
RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6


def write_flow(path, flow):
    """Write an ``[H, W, 2]`` flow map; returns the path."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must be [H,W,2], got {flow.shape}")
    h, w = flow.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())
    return path


def read_flow(path):
    """Read a ``.flo`` file into an ``[H, W, 2]`` float32 array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"Failed to read flow file {path}: {e}")
    if len(raw) < HEADER_BYTES:
        raise FormatError(f"{path} is too short for a .flo header")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    w, h = np.frombuffer(raw, dtype="<i4", count=2, offset=4)
    expected = HEADER_BYTES + 8 * int(w) * int(h)
    if w < 0 or h < 0 or len(raw) != expected:
        raise FormatError(f"{path}: size {len(raw)} does not match {w}x{h} flow ({expected} bytes)")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_BYTES)
    return data.reshape(int(h), int(w), 2).astype(np.float32)


def make_colorwheel():
    """``[55, 3]`` RGB wheel in 0..255."""
    ncols = RY + YG + GC + CB + BM + MR
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:RY, 0] = 255
    wheel[0:RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


def flow_to_color(flow, max_flow=None):
    """Color ``[H, W, 2]`` flow into an ``[H, W, 3]`` uint8 RGB image.

    Magnitudes are normalized by ``max_flow`` (default: the image maximum);
    zero flow is white and a vector at the normalizing magnitude takes the
    pure wheel color. One wheel bin spans 360/55 degrees.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    rad = np.sqrt(u * u + v * v)
    norm = float(rad.max()) if max_flow is None else float(max_flow)
    if norm > 0:
        u, v, rad = u / norm, v / norm, rad / norm
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = np.mod((angle + 1.0) / 2.0 * ncols, ncols)
    k0 = np.floor(fk).astype(np.int64) % ncols
    k1 = (k0 + 1) % ncols
    frac = fk - np.floor(fk)
    image = np.zeros(flow.shape[:2] + (3,), dtype=np.uint8)
    inside = rad <= 1
    for channel in range(3):
        col = (1 - frac) * wheel[k0, channel] / 255.0 + frac * wheel[k1, channel] / 255.0
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        image[..., channel] = np.floor(255 * col)
    return image


def save_flow_image(path, flow, max_flow=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(flow_to_color(flow, max_flow)).save(path)
    return path
