"""Plain-text track files.

A track file is a CSV table preceded by two ``#`` header lines::

    # trackfile v1
    # T=8 N=3 H=64 W=64 query_frame=0
    point,frame,x,y,vis,valid,qx,qy
    0,0,12.0,30.5,1,1,12.0,30.5
    ...

One row per (point, frame); ``qx, qy`` repeat the point's query position.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import FormatError

VERSION = 1
COLUMNS = ["point", "frame", "x", "y", "vis", "valid", "qx", "qy"]
_SHAPE_RE = re.compile(r"T=(\d+)\s+N=(\d+)\s+H=(\d+)\s+W=(\d+)\s+query_frame=(\d+)")


@dataclass
class TrackFile:
    tracks: np.ndarray
    visibility: np.ndarray
    valid: np.ndarray
    queries: np.ndarray
    height: int
    width: int
    query_frame: int = 0

    @property
    def num_frames(self):
        return self.tracks.shape[0]

    @property
    def num_points(self):
        return self.tracks.shape[1]

    def to_frame(self):
        t, n = self.num_frames, self.num_points
        frame_idx, point_idx = np.meshgrid(np.arange(t), np.arange(n), indexing="ij")
        table = pd.DataFrame({
            "point": point_idx.ravel(),
            "frame": frame_idx.ravel(),
            "x": self.tracks[..., 0].ravel(),
            "y": self.tracks[..., 1].ravel(),
            "vis": self.visibility.ravel(),
            "valid": self.valid.astype(np.int64).ravel(),
            "qx": np.broadcast_to(self.queries[:, 0], (t, n)).ravel(),
            "qy": np.broadcast_to(self.queries[:, 1], (t, n)).ravel(),
        })
        return table.sort_values(["point", "frame"], kind="stable")[COLUMNS]


def write_trackfile(path, tf):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        f"# trackfile v{VERSION}\n"
        f"# T={tf.num_frames} N={tf.num_points} H={tf.height} W={tf.width} "
        f"query_frame={tf.query_frame}\n"
    )
    with path.open("w", newline="", encoding="utf-8") as f:
        f.write(header)
        tf.to_frame().to_csv(f, index=False, float_format="%.6f")
    return path


def read_trackfile(path):
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            version_line = f.readline().strip()
            shape_line = f.readline().strip()
        table = pd.read_csv(path, comment="#")
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise FormatError(f"Failed to read track file {path}: {e}")
    if version_line != f"# trackfile v{VERSION}":
        raise FormatError(f"{path}: unsupported track file header {version_line!r}")
    match = _SHAPE_RE.search(shape_line)
    if not match:
        raise FormatError(f"{path}: malformed shape line {shape_line!r}")
    t, n, h, w, q = (int(g) for g in match.groups())
    missing = [c for c in COLUMNS if c not in table.columns]
    if missing:
        raise FormatError(f"{path}: missing columns {missing}")
    if len(table) != t * n:
        raise FormatError(f"{path}: expected {t * n} rows for T={t}, N={n}, found {len(table)}")
    table = table.sort_values(["frame", "point"], kind="stable")
    frames, points = table["frame"].to_numpy(), table["point"].to_numpy()
    if frames.min(initial=0) < 0 or frames.max(initial=0) >= max(t, 1) or points.max(initial=0) >= max(n, 1):
        raise FormatError(f"{path}: frame/point index out of range")
    grid = lambda col: table[col].to_numpy(dtype=np.float64).reshape(t, n)
    tracks = np.stack([grid("x"), grid("y")], axis=-1).astype(np.float32)
    queries = np.stack([grid("qx")[0], grid("qy")[0]], axis=-1).astype(np.float32) if t else np.zeros((n, 2), np.float32)
    return TrackFile(
        tracks=tracks,
        visibility=grid("vis").astype(np.float32),
        valid=grid("valid").astype(bool),
        queries=queries,
        height=h,
        width=w,
        query_frame=q,
    )
