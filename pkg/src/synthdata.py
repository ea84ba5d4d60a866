"""Procedural sprite videos with exact flow, tracks and visibility.

A scene is a textured background plane plus sprites stacked far to near.
Each layer carries one homogeneous ``3x3`` transform per frame mapping its
local texture coordinates to image coordinates, so the correspondence of any
frame-0 pixel at frame ``t`` is ``A_t(A_0^{-1}(p))`` for the layer that owns
it at frame 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .errors import ArgumentError
from .flow_io import write_flow
from .supervision import GroundTruth
from .trackfile import TrackFile, write_trackfile
from .utils import save_frame

MAX_RETRIES = 20
MIN_DET = 0.05
# Round-trip tolerance when testing whether a mapped point is still in frame.
EDGE_EPS = 1e-6
SHAPES = ("plane", "rect", "ellipse")


@dataclass
class MotionRanges:
    max_speed: float = 4.0
    max_rotation: float = 0.03
    max_zoom: float = 0.02
    background_speed: float = 2.0


@dataclass
class Layer:
    texture: np.ndarray
    transforms: np.ndarray
    shape: str = "rect"

    @property
    def size(self):
        return self.texture.shape[2], self.texture.shape[1]

    def inverse(self, t):
        return np.linalg.inv(self.transforms[t])

    def covers(self, t, xs, ys):
        """Whether image points ``(xs, ys)`` at frame ``t`` land on this layer."""
        if self.shape == "plane":
            return np.ones(np.shape(xs), dtype=bool)
        lx, ly = apply_transform(self.inverse(t), xs, ys)
        w, h = self.size
        if self.shape == "rect":
            return (lx >= 0) & (lx <= w - 1) & (ly >= 0) & (ly <= h - 1)
        cx, cy, rx, ry = (w - 1) / 2, (h - 1) / 2, (w - 1) / 2, (h - 1) / 2
        return ((lx - cx) / rx) ** 2 + ((ly - cy) / ry) ** 2 <= 1.0


@dataclass
class SpriteScene:
    background: Layer
    sprites: List[Layer]
    num_frames: int
    height: int
    width: int
    seed: Optional[int] = None

    @property
    def layers(self):
        return [self.background] + list(self.sprites)

    def summary(self):
        return {
            "frames": self.num_frames,
            "height": self.height,
            "width": self.width,
            "sprites": [
                {"shape": s.shape, "size": list(s.size), "depth": i + 1}
                for i, s in enumerate(self.sprites)
            ],
        }


@dataclass
class SyntheticSample:
    """Video ``[T,3,H,W]`` in [0,1], dense flow frame 0 -> t and sparse tracks."""

    video: np.ndarray
    flow: np.ndarray
    vis: np.ndarray
    flow_valid: np.ndarray
    queries: np.ndarray
    tracks: np.ndarray
    track_vis: np.ndarray
    track_valid: np.ndarray
    seed: Optional[int] = None
    scene: Optional[SpriteScene] = field(default=None, repr=False)

    @property
    def num_frames(self):
        return self.video.shape[0]

    def ground_truth(self, labeled=True):
        return GroundTruth(
            queries=self.queries,
            tracks=self.tracks,
            valid=self.track_valid,
            visibility=self.track_vis if labeled else None,
        )

    def flow_ground_truth(self, stride=2):
        """Flow-style labels (no visibility) from a regular grid of valid pixels."""
        h, w = self.flow_valid.shape
        ys, xs = np.mgrid[0:h:stride, 0:w:stride]
        keep = self.flow_valid[ys, xs]
        xs, ys = xs[keep], ys[keep]
        queries = np.stack([xs, ys], axis=-1).astype(np.float32)
        tracks = queries[None] + self.flow[:, ys, xs]
        valid = np.ones(tracks.shape[:2], dtype=bool)
        return GroundTruth(queries=queries, tracks=tracks, valid=valid, visibility=None)


# ---------------------------------------------------------------------------
# transforms and textures
# ---------------------------------------------------------------------------


def apply_transform(mat, xs, ys):
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    return (
        mat[0, 0] * xs + mat[0, 1] * ys + mat[0, 2],
        mat[1, 0] * xs + mat[1, 1] * ys + mat[1, 2],
    )


def affine_path(num_frames, anchor, position, velocity, theta=0.0, omega=0.0, zoom=0.0, scale=1.0):
    """``[T, 3, 3]`` transforms placing local point ``anchor`` at ``position + t*velocity``.

    The layer rotates by ``omega`` and grows by ``zoom`` (relative) per frame.
    """
    mats = np.zeros((num_frames, 3, 3))
    for t in range(num_frames):
        s = scale * (1.0 + zoom * t)
        c, sn = np.cos(theta + omega * t), np.sin(theta + omega * t)
        m = s * np.array([[c, -sn], [sn, c]])
        pos = np.asarray(position, dtype=np.float64) + t * np.asarray(velocity, dtype=np.float64)
        mats[t, :2, :2] = m
        mats[t, :2, 2] = pos - m @ np.asarray(anchor, dtype=np.float64)
        mats[t, 2, 2] = 1.0
    return mats


def is_degenerate(transforms):
    dets = np.linalg.det(transforms[:, :2, :2])
    return not np.all(np.isfinite(transforms)) or bool(np.any(np.abs(dets) < MIN_DET))


def noise_texture(rng, height, width, sigma=2.0):
    """Periodic band-limited RGB noise in [0, 1]."""
    raw = rng.standard_normal((3, height, width))
    smooth = ndimage.gaussian_filter(raw, sigma=(0, sigma, sigma), mode="wrap")
    fine = ndimage.gaussian_filter(rng.standard_normal((3, height, width)), sigma=(0, 0.7, 0.7), mode="wrap")
    tex = smooth / (smooth.std() + 1e-8) + 0.5 * fine / (fine.std() + 1e-8)
    lo, hi = tex.min(axis=(1, 2), keepdims=True), tex.max(axis=(1, 2), keepdims=True)
    tex = (tex - lo) / np.maximum(hi - lo, 1e-8)
    tint = rng.uniform(0.3, 1.0, size=(3, 1, 1))
    return (0.15 + 0.85 * tex * tint).astype(np.float32)


def _draw_path(rng, num_frames, anchor, position, motion, speed, allow_spin=True):
    for _ in range(MAX_RETRIES):
        velocity = rng.uniform(-speed, speed, size=2)
        omega = rng.uniform(-motion.max_rotation, motion.max_rotation) if allow_spin else 0.0
        zoom = rng.uniform(-motion.max_zoom, motion.max_zoom) if allow_spin else 0.0
        theta = rng.uniform(-np.pi, np.pi) if allow_spin else 0.0
        mats = affine_path(num_frames, anchor, position, velocity, theta, omega, zoom)
        if not is_degenerate(mats):
            return mats
    raise ArgumentError(
        f"could not draw an invertible transform in {MAX_RETRIES} tries; reduce max_zoom"
    )


def random_scene(seed, num_frames, height, width, n_sprites=2, motion=None):
    """Background plus ``n_sprites`` random rectangles/ellipses with affine motion."""
    if num_frames < 1:
        raise ArgumentError(f"num_frames must be >= 1, got {num_frames}")
    motion = motion or MotionRanges()
    rng = np.random.default_rng(seed)
    bh, bw = 2 * height, 2 * width
    bg_anchor = ((bw - 1) / 2, (bh - 1) / 2)
    bg_center = ((width - 1) / 2, (height - 1) / 2)
    background = Layer(
        noise_texture(rng, bh, bw, sigma=rng.uniform(1.5, 3.0)),
        _draw_path(rng, num_frames, bg_anchor, bg_center, motion, motion.background_speed, allow_spin=False),
        shape="plane",
    )
    sprites = []
    for _ in range(n_sprites):
        sh = int(rng.integers(max(4, height // 6), max(5, height // 2)))
        sw = int(rng.integers(max(4, width // 6), max(5, width // 2)))
        anchor = ((sw - 1) / 2, (sh - 1) / 2)
        position = (rng.uniform(0, width - 1), rng.uniform(0, height - 1))
        sprites.append(Layer(
            noise_texture(rng, sh, sw, sigma=rng.uniform(1.0, 2.0)),
            _draw_path(rng, num_frames, anchor, position, motion, motion.max_speed),
            shape=str(rng.choice(["rect", "ellipse"])),
        ))
    return SpriteScene(background, sprites, num_frames, height, width, seed)


def translating_scene(seed, num_frames, height, width, velocity):
    """A single textured plane translating by ``velocity`` px per frame."""
    rng = np.random.default_rng(seed)
    bh, bw = 2 * height, 2 * width
    plane = Layer(
        noise_texture(rng, bh, bw),
        affine_path(num_frames, ((bw - 1) / 2, (bh - 1) / 2), ((width - 1) / 2, (height - 1) / 2), velocity),
        shape="plane",
    )
    return SpriteScene(plane, [], num_frames, height, width, seed)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _sample_texture(layer, t, xs, ys):
    lx, ly = apply_transform(layer.inverse(t), xs, ys)
    mode = "grid-wrap" if layer.shape == "plane" else "nearest"
    return np.stack([
        ndimage.map_coordinates(channel, [ly, lx], order=1, mode=mode) for channel in layer.texture
    ])


def owner_map(scene, t, xs, ys):
    """Index of the nearest layer covering each point (0 is the background)."""
    owner = np.zeros(np.shape(xs), dtype=np.int64)
    for idx, layer in enumerate(scene.layers[1:], start=1):
        owner[layer.covers(t, xs, ys)] = idx
    return owner


def render_frame(scene, t):
    ys, xs = np.mgrid[0:scene.height, 0:scene.width].astype(np.float64)
    frame = np.zeros((3, scene.height, scene.width), dtype=np.float64)
    for layer in scene.layers:
        mask = layer.covers(t, xs, ys)
        frame[:, mask] = _sample_texture(layer, t, xs[mask], ys[mask])
    return frame.astype(np.float32)


def in_bounds(xs, ys, height, width):
    return (xs >= -EDGE_EPS) & (xs <= width - 1 + EDGE_EPS) & (ys >= -EDGE_EPS) & (ys <= height - 1 + EDGE_EPS)


def correspondences(scene, xs, ys):
    """Positions ``[T, n, 2]`` and visibility ``[T, n]`` of frame-0 points."""
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    owner = owner_map(scene, 0, xs, ys)
    positions = np.zeros((scene.num_frames,) + xs.shape + (2,))
    visible = np.zeros((scene.num_frames,) + xs.shape, dtype=bool)
    for idx, layer in enumerate(scene.layers):
        sel = owner == idx
        if not sel.any():
            continue
        lx, ly = apply_transform(layer.inverse(0), xs[sel], ys[sel])
        for t in range(scene.num_frames):
            qx, qy = apply_transform(layer.transforms[t], lx, ly)
            positions[t][sel] = np.stack([qx, qy], axis=-1)
            inside = in_bounds(qx, qy, scene.height, scene.width)
            hidden = np.zeros(qx.shape, dtype=bool)
            for nearer in scene.layers[idx + 1:]:
                hidden |= nearer.covers(t, qx, qy)
            visible[t][sel] = inside & ~hidden
    return positions, visible


def _pick_queries(rng, owner, n_tracks):
    """Integer query pixels, half on sprites (when any) and half on the background."""
    ys, xs = np.nonzero(np.ones_like(owner, dtype=bool))
    flat_owner = owner[ys, xs]
    on_sprite = np.flatnonzero(flat_owner > 0)
    on_background = np.flatnonzero(flat_owner == 0)
    n_sprite = min(len(on_sprite), n_tracks // 2) if len(on_background) else min(len(on_sprite), n_tracks)
    n_bg = min(len(on_background), n_tracks - n_sprite)
    chosen = np.concatenate([
        rng.choice(on_sprite, size=n_sprite, replace=False) if n_sprite else np.zeros(0, np.int64),
        rng.choice(on_background, size=n_bg, replace=False) if n_bg else np.zeros(0, np.int64),
    ])
    return np.stack([xs[chosen], ys[chosen]], axis=-1).astype(np.float64)


def render_scene(scene, n_tracks=256, seed=None):
    """Render ``scene`` and label it densely and at sampled query points."""
    rng = np.random.default_rng(scene.seed if seed is None else seed)
    h, w = scene.height, scene.width
    video = np.stack([render_frame(scene, t) for t in range(scene.num_frames)])
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    positions, visible = correspondences(scene, xs, ys)
    grid = np.stack([xs, ys], axis=-1)
    flow = (positions - grid[None]).astype(np.float32)
    queries = _pick_queries(rng, owner_map(scene, 0, xs, ys), n_tracks)
    tracks, track_vis = correspondences(scene, queries[:, 0], queries[:, 1])
    return SyntheticSample(
        video=video,
        flow=flow,
        vis=visible.astype(np.float32),
        flow_valid=np.ones((h, w), dtype=bool),
        queries=queries.astype(np.float32),
        tracks=tracks.astype(np.float32),
        track_vis=track_vis.astype(np.float32),
        track_valid=np.ones(track_vis.shape, dtype=bool),
        seed=scene.seed if seed is None else seed,
        scene=scene,
    )


def generate(seed, num_frames, height, width, n_sprites=2, motion=None, n_tracks=256):
    """Deterministic synthetic sample for ``seed``."""
    scene = random_scene(seed, num_frames, height, width, n_sprites, motion)
    return render_scene(scene, n_tracks, seed)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentParams:
    shift: float = 0.0
    scale_range: float = 0.0
    color_jitter: float = 0.0
    max_occluders: int = 0
    occluder_size: tuple = (6, 16)

    @classmethod
    def from_data_config(cls, cfg):
        return cls(cfg.shift, cfg.scale_range, cfg.color_jitter, cfg.max_occluders, tuple(cfg.occluder_size))


def _similarity(sample, scale, shift):
    """Zoom by ``scale`` about the frame center, then translate by ``shift``.

    Dense labels are recomputed from the source scene at each output pixel's
    pre-image, so flow and visibility stay exact at layer boundaries.
    """
    if sample.scene is None:
        raise ArgumentError("similarity augmentation needs the sample's scene")
    t, _, h, w = sample.video.shape
    cx, cy = (w - 1) / 2, (h - 1) / 2
    fwd = lambda x, y: (scale * (x - cx) + cx + shift[0], scale * (y - cy) + cy + shift[1])
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x, src_y = (xs - cx - shift[0]) / scale + cx, (ys - cy - shift[1]) / scale + cy

    video = np.empty_like(sample.video)
    for f in range(t):
        for c in range(3):
            video[f, c] = ndimage.map_coordinates(sample.video[f, c], [src_y, src_x], order=1, mode="nearest")

    positions, visible = correspondences(sample.scene, src_x, src_y)
    dest_x, dest_y = fwd(positions[..., 0], positions[..., 1])
    flow = np.stack([dest_x - xs[None], dest_y - ys[None]], axis=-1)
    vis = visible & in_bounds(dest_x, dest_y, h, w)

    qx, qy = fwd(sample.queries[:, 0], sample.queries[:, 1])
    tx, ty = fwd(sample.tracks[..., 0], sample.tracks[..., 1])
    return SyntheticSample(
        video=video,
        flow=flow.astype(np.float32),
        vis=vis.astype(np.float32),
        flow_valid=in_bounds(src_x, src_y, h, w),
        queries=np.stack([qx, qy], axis=-1).astype(np.float32),
        tracks=np.stack([tx, ty], axis=-1).astype(np.float32),
        track_vis=(sample.track_vis * in_bounds(tx, ty, h, w)).astype(np.float32),
        track_valid=sample.track_valid & in_bounds(qx, qy, h, w)[None],
        seed=sample.seed,
        scene=sample.scene,
    )


def _color_jitter(video, rng, strength):
    gain = rng.uniform(1.0 - strength, 1.0 + strength, size=(1, 3, 1, 1))
    bias = rng.uniform(-strength / 2, strength / 2, size=(1, 3, 1, 1))
    return np.clip(video * gain + bias, 0.0, 1.0).astype(video.dtype)


def paste_occluder(sample, x0, y0, size, frames, color):
    """Paste an opaque ``size``-pixel square at (x0, y0) on ``frames``; covered labels become occluded."""
    video, vis, track_vis = sample.video.copy(), sample.vis.copy(), sample.track_vis.copy()
    h, w = video.shape[2:]
    x1, y1 = x0 + size, y0 + size
    ys, xs = np.mgrid[0:h, 0:w]
    for f in frames:
        video[f, :, max(0, y0):max(0, y1), max(0, x0):max(0, x1)] = np.asarray(color).reshape(3, 1, 1)
        dx, dy = xs + sample.flow[f, ..., 0], ys + sample.flow[f, ..., 1]
        covered = (dx >= x0 - 0.5) & (dx < x1 - 0.5) & (dy >= y0 - 0.5) & (dy < y1 - 0.5)
        vis[f][covered] = 0.0
        px, py = sample.tracks[f, :, 0], sample.tracks[f, :, 1]
        hit = (px >= x0 - 0.5) & (px < x1 - 0.5) & (py >= y0 - 0.5) & (py < y1 - 0.5)
        track_vis[f][hit] = 0.0
    return SyntheticSample(
        video=video, flow=sample.flow, vis=vis, flow_valid=sample.flow_valid,
        queries=sample.queries, tracks=sample.tracks, track_vis=track_vis,
        track_valid=sample.track_valid, seed=sample.seed, scene=sample.scene,
    )


def augment(sample, seed, params=None):
    """Similarity shift/scale, per-channel color jitter and square occluders.

    All-zero magnitudes return the sample unchanged. Occluders are pasted on
    frames after the first.
    """
    params = params or AugmentParams()
    rng = np.random.default_rng(seed)
    out = sample
    if params.shift > 0 or params.scale_range > 0:
        scale = rng.uniform(1.0 - params.scale_range, 1.0 + params.scale_range)
        shift = rng.uniform(-params.shift, params.shift, size=2)
        out = _similarity(out, scale, shift)
    if params.color_jitter > 0:
        out = SyntheticSample(**{**out.__dict__, "video": _color_jitter(out.video, rng, params.color_jitter)})
    t, _, h, w = out.video.shape
    if params.max_occluders > 0 and t > 1:
        for _ in range(int(rng.integers(0, params.max_occluders + 1))):
            size = int(rng.integers(params.occluder_size[0], params.occluder_size[1] + 1))
            x0 = int(rng.integers(-size // 2, w - size // 2))
            y0 = int(rng.integers(-size // 2, h - size // 2))
            start = int(rng.integers(1, t))
            stop = int(rng.integers(start + 1, t + 1))
            out = paste_occluder(out, x0, y0, size, range(start, stop), rng.uniform(0, 1, size=3))
    return out


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def sample_trackfile(sample):
    _, _, h, w = sample.video.shape
    return TrackFile(
        tracks=sample.tracks,
        visibility=sample.track_vis,
        valid=sample.track_valid,
        queries=sample.queries,
        height=h,
        width=w,
        query_frame=0,
    )


def write_sample(sample, directory):
    """Write frames, per-frame flow, tracks and a JSON summary under ``directory``."""
    directory = Path(directory)
    for t in range(sample.num_frames):
        save_frame(directory / "frames" / f"{t:05d}.png", sample.video[t])
        write_flow(directory / "flow" / f"{t:05d}.flo", sample.flow[t])
    write_trackfile(directory / "tracks.csv", sample_trackfile(sample))
    meta = {
        "seed": sample.seed,
        "shape": list(sample.video.shape),
        "num_tracks": int(sample.queries.shape[0]),
        "scene": sample.scene.summary() if sample.scene is not None else None,
    }
    (directory / "sample.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return directory
