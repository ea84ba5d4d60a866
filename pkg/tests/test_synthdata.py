"""Synthetic sprite videos: exact labels, determinism, augmentation."""
import json

import numpy as np
import pytest

from src.errors import ArgumentError
from src.synthdata import (
    EDGE_EPS, AugmentParams, Layer, MotionRanges, SpriteScene, _similarity, affine_path, apply_transform,
    augment, correspondences, generate, noise_texture, owner_map, paste_occluder, random_scene,
    render_scene, translating_scene, write_sample,
)

STILL = MotionRanges(max_speed=0.0, max_rotation=0.0, max_zoom=0.0, background_speed=0.0)
SPINNING = MotionRanges(max_speed=3.0, max_rotation=0.05, max_zoom=0.02, background_speed=1.5)


def sweeping_scene(num_frames=5, size=32):
    """Static background with one 8x8 square sliding right 4 px per frame along row 16."""
    rng = np.random.default_rng(3)
    background = Layer(
        noise_texture(rng, 2 * size, 2 * size),
        affine_path(num_frames, (size - 0.5, size - 0.5), ((size - 1) / 2, (size - 1) / 2), (0.0, 0.0)),
        shape="plane",
    )
    square = Layer(noise_texture(rng, 8, 8), affine_path(num_frames, (3.5, 3.5), (4.0, 16.0), (4.0, 0.0)))
    return SpriteScene(background, [square], num_frames, size, size, seed=3)


def edge_margin(layer, lx, ly):
    """How far local points sit inside the layer outline; infinite on the plane."""
    if layer.shape == "plane":
        return np.full(np.shape(lx), np.inf)
    w, h = layer.size
    if layer.shape == "rect":
        return np.minimum.reduce([lx, w - 1 - lx, ly, h - 1 - ly])
    cx, cy = (w - 1) / 2, (h - 1) / 2
    return 1.0 - ((lx - cx) / cx) ** 2 - ((ly - cy) / cy) ** 2


def owner_margins(scene, xs, ys, owners):
    margins = np.full(xs.shape, np.inf)
    for idx, layer in enumerate(scene.layers):
        sel = owners == idx
        lx, ly = apply_transform(layer.inverse(0), xs[sel], ys[sel])
        margins[sel] = edge_margin(layer, lx, ly)
    return margins


def similarity_oracle(scene, scale, shift):
    """Per-pixel flow and visibility after zooming about the center and shifting."""
    h, w, frames = scene.height, scene.width, scene.num_frames
    cx, cy = (w - 1) / 2, (h - 1) / 2
    inside = lambda a, b: -EDGE_EPS <= a <= w - 1 + EDGE_EPS and -EDGE_EPS <= b <= h - 1 + EDGE_EPS
    flow = np.zeros((frames, h, w, 2))
    vis = np.zeros((frames, h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            sx, sy = (x - cx - shift[0]) / scale + cx, (y - cy - shift[1]) / scale + cy
            owner = int(owner_map(scene, 0, np.array([sx]), np.array([sy]))[0])
            layer = scene.layers[owner]
            local = np.linalg.solve(layer.transforms[0], [sx, sy, 1.0])
            for t in range(frames):
                px, py, _ = layer.transforms[t] @ local
                dx, dy = scale * (px - cx) + cx + shift[0], scale * (py - cy) + cy + shift[1]
                flow[t, y, x] = dx - x, dy - y
                hidden = any(n.covers(t, np.array([px]), np.array([py]))[0] for n in scene.layers[owner + 1:])
                vis[t, y, x] = not hidden and inside(px, py) and inside(dx, dy)
    return flow, vis


class TestLabels:
    def test_zero_motion(self):
        sample = generate(5, 4, 32, 32, n_sprites=2, motion=STILL, n_tracks=16)
        assert np.abs(sample.flow).max() < 1e-4
        assert (sample.vis == 1).all()
        for t in range(1, 4):
            np.testing.assert_array_equal(sample.video[t], sample.video[0])

    def test_translation_flow(self):
        sample = render_scene(translating_scene(2, 4, 32, 32, (1.5, -2.0)), n_tracks=8)
        for t in range(4):
            np.testing.assert_allclose(sample.flow[t, ..., 0], 1.5 * t, atol=1e-4)
            np.testing.assert_allclose(sample.flow[t, ..., 1], -2.0 * t, atol=1e-4)
        np.testing.assert_allclose(sample.tracks, sample.queries[None] + sample.flow[:, 0, 0][:, None], atol=1e-4)

    def test_integer_translation_moves_pixels(self):
        sample = render_scene(translating_scene(4, 3, 32, 32, (2.0, 1.0)), n_tracks=0)
        for t in (1, 2):
            np.testing.assert_allclose(
                sample.video[t, :, 1 * t:, 2 * t:], sample.video[0, :, :32 - t, :32 - 2 * t], atol=1e-4
            )

    def test_leaving_the_frame_is_not_visible(self):
        scene = translating_scene(1, 4, 32, 32, (10.0, 0.0))
        _, vis = correspondences(scene, np.array([25.0, 5.0]), np.array([10.0, 10.0]))
        assert vis[:, 0].tolist() == [True, False, False, False]
        assert vis[:, 1].tolist() == [True, True, True, False]

    def test_sweeping_sprite_occludes_background(self):
        scene = sweeping_scene()
        pos, vis = correspondences(scene, np.array([16.0]), np.array([16.0]))
        assert vis[:, 0].tolist() == [True, True, True, False, True]
        np.testing.assert_allclose(pos[:, 0], [[16.0, 16.0]] * 5, atol=1e-9)

    def test_sprite_point_follows_sprite(self):
        pos, vis = correspondences(sweeping_scene(), np.array([4.0]), np.array([16.0]))
        np.testing.assert_allclose(pos[:, 0, 0], [4.0, 8.0, 12.0, 16.0, 20.0], atol=1e-9)
        assert vis.all()

    def test_visible_points_own_their_pixel(self):
        scene = generate(11, 6, 32, 32, n_sprites=3, n_tracks=0).scene
        ys, xs = np.mgrid[0:32, 0:32].astype(np.float64)
        start = owner_map(scene, 0, xs, ys)
        clear = owner_margins(scene, xs, ys, start) > EDGE_EPS
        positions, visible = correspondences(scene, xs, ys)
        for t in range(scene.num_frames):
            seen = visible[t] & clear
            now = owner_map(scene, t, positions[t, ..., 0][seen], positions[t, ..., 1][seen])
            np.testing.assert_array_equal(now, start[seen])

    def test_queries_are_integer_pixels(self):
        sample = generate(9, 3, 32, 32, n_sprites=2, n_tracks=6)
        assert sample.queries.shape == (6, 2)
        np.testing.assert_array_equal(sample.queries, np.round(sample.queries))
        owners = owner_map(sample.scene, 0, sample.queries[:, 0], sample.queries[:, 1])
        assert (owners > 0).sum() == 3

    def test_query_frame_matches_queries(self):
        sample = generate(8, 3, 32, 32, n_tracks=10)
        np.testing.assert_allclose(sample.tracks[0], sample.queries, atol=1e-4)
        assert (sample.track_vis[0] == 1).all()


class TestDeterminism:
    def test_same_seed_same_sample(self):
        a = generate(21, 4, 32, 32, n_tracks=12)
        b = generate(21, 4, 32, 32, n_tracks=12)
        for name in ("video", "flow", "vis", "queries", "tracks", "track_vis"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_different_seed_differs(self):
        assert not np.array_equal(generate(1, 2, 32, 32).video, generate(2, 2, 32, 32).video)

    def test_no_frames_rejected(self):
        with pytest.raises(ArgumentError):
            random_scene(0, 0, 32, 32)


class TestAugment:
    def test_zero_magnitudes_are_identity(self):
        sample = generate(4, 3, 32, 32, n_tracks=8)
        assert augment(sample, 99, AugmentParams()) is sample

    def test_double_scale(self):
        sample = render_scene(translating_scene(6, 3, 32, 32, (1.0, 0.5)), n_tracks=8)
        big = _similarity(sample, 2.0, (0.0, 0.0))
        np.testing.assert_allclose(big.flow[2, ..., 0], 4.0, atol=1e-4)
        np.testing.assert_allclose(big.flow[2, ..., 1], 2.0, atol=1e-4)
        np.testing.assert_allclose(big.queries, 2.0 * (sample.queries - 15.5) + 15.5, atol=1e-4)
        np.testing.assert_allclose(big.tracks, 2.0 * (sample.tracks - 15.5) + 15.5, atol=1e-3)

    def test_shift_keeps_tracks_consistent(self):
        sample = render_scene(translating_scene(6, 3, 32, 32, (1.0, 0.0)), n_tracks=8)
        moved = _similarity(sample, 1.0, (3.0, -2.0))
        np.testing.assert_allclose(moved.queries, sample.queries + [3.0, -2.0], atol=1e-5)
        np.testing.assert_allclose(moved.tracks[0], moved.queries, atol=1e-4)

    def test_spinning_sprites_labels_are_exact(self):
        sample = generate(7, 7, 32, 32, n_sprites=3, motion=SPINNING, n_tracks=8)
        out = _similarity(sample, 1.07, (0.4, -0.3))
        flow, vis = similarity_oracle(sample.scene, 1.07, (0.4, -0.3))
        np.testing.assert_allclose(out.flow, flow, atol=1e-4)
        np.testing.assert_array_equal(out.vis.astype(bool), vis)
        np.testing.assert_allclose(out.flow[0], 0.0, atol=1e-4)

    def test_zoom_out_marks_missing_border(self):
        sample = generate(7, 2, 32, 32, n_sprites=1, n_tracks=4)
        out = _similarity(sample, 0.8, (0.0, 0.0))
        assert not out.flow_valid[0, 0] and not out.flow_valid[31, 31]
        assert out.flow_valid[16, 16]

    def test_requires_scene(self):
        sample = generate(4, 2, 16, 16, n_tracks=4)
        sample.scene = None
        with pytest.raises(ArgumentError):
            _similarity(sample, 1.1, (0.0, 0.0))

    def test_color_jitter_leaves_labels(self):
        sample = generate(4, 3, 32, 32, n_tracks=8)
        out = augment(sample, 5, AugmentParams(color_jitter=0.2))
        assert not np.array_equal(out.video, sample.video)
        np.testing.assert_array_equal(out.tracks, sample.tracks)
        assert out.video.min() >= 0.0 and out.video.max() <= 1.0

    def test_occluder_hides_covered_labels(self):
        sample = generate(4, 3, 32, 32, n_sprites=1, motion=STILL, n_tracks=0)
        sample.queries = np.array([[9.0, 9.0], [20.0, 20.0]], dtype=np.float32)
        sample.tracks = np.broadcast_to(sample.queries, (3, 2, 2)).copy()
        sample.track_vis = np.ones((3, 2), np.float32)
        out = paste_occluder(sample, 8, 8, 4, [1], (0.0, 0.5, 1.0))
        np.testing.assert_array_equal(out.video[1, :, 8:12, 8:12], np.array([0.0, 0.5, 1.0])[:, None, None]
                                      * np.ones((3, 4, 4)))
        assert (out.vis[1, 8:12, 8:12] == 0).all()
        assert out.vis[1, 7, 8] == sample.vis[1, 7, 8]
        np.testing.assert_array_equal(out.vis[0], sample.vis[0])
        assert out.track_vis[:, 0].tolist() == [1.0, 0.0, 1.0]
        assert (out.track_vis[:, 1] == 1).all()


class TestWriteSample:
    def test_layout(self, tmp_path):
        sample = generate(3, 2, 16, 16, n_sprites=1, n_tracks=4)
        out = write_sample(sample, tmp_path / "s")
        assert sorted(p.name for p in (out / "frames").iterdir()) == ["00000.png", "00001.png"]
        assert sorted(p.name for p in (out / "flow").iterdir()) == ["00000.flo", "00001.flo"]
        assert (out / "tracks.csv").exists()
        meta = json.loads((out / "sample.json").read_text(encoding="utf-8"))
        assert meta["seed"] == 3 and meta["shape"] == [2, 3, 16, 16]
