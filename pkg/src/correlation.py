"""Correlation pyramids between the query feature map and window frames."""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError
from .kernels import avg_pool2d, bilinear_sample, bilinear_sample_batched
from .tensor import as_tensor, concat, matmul, reshape, transpose

DEFAULT_CHUNK_ROWS = 8


def patch_offsets(radius):
    """``[(2R+1)^2, 2]`` (dx, dy) offsets, dy outer and dx inner."""
    span = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=-1)


def check_levels(h, w, levels):
    """The coarsest level must keep at least two cells along each axis."""
    if levels < 1:
        raise ConfigError(f"corr_levels must be >= 1, got {levels}", field="corr_levels")
    need = 2 ** levels
    if need > h:
        raise ConfigError(
            f"{levels} correlation levels need a feature height >= {need}, got height {h}",
            field="corr_levels",
        )
    if need > w:
        raise ConfigError(
            f"{levels} correlation levels need a feature width >= {need}, got width {w}",
            field="corr_levels",
        )


def build_pyramid(feat, levels):
    """Average-pool ``[..., D, h, w]`` features by 2 repeatedly; level 0 is the input."""
    check_levels(feat.shape[-2], feat.shape[-1], levels)
    pyramid = [feat]
    for _ in range(levels - 1):
        pyramid.append(avg_pool2d(pyramid[-1], 2))
    return pyramid


def correlate(query_feat, target):
    """Scores ``<f_u, g_v> / sqrt(D)`` for every query cell u and target cell v.

    ``query_feat`` is ``[D, h, w]`` (or ``[n, D]`` cells); ``target`` is
    ``[S, D, h', w']``. Returns ``[S, n, h', w']`` with ``n = h*w``.
    """
    target = target if target.ndim == 4 else reshape(target, (1,) + target.shape)
    d = target.shape[1]
    if query_feat.ndim == 3:
        if query_feat.shape[0] != d:
            raise DimensionError(
                f"query has {query_feat.shape[0]} channels, target has {d}", axis=0
            )
        q = transpose(reshape(query_feat, (d, -1)), (1, 0))
    else:
        if query_feat.shape[-1] != d:
            raise DimensionError(
                f"query has {query_feat.shape[-1]} channels, target has {d}", axis=1
            )
        q = query_feat
    s, _, hl, wl = target.shape
    g = reshape(target, (s, d, hl * wl))
    scores = matmul(q, g) * (1.0 / math.sqrt(d))
    return reshape(scores, (s, q.shape[0], hl, wl))


class CorrPyramid:
    """Lazily evaluated multi-scale correlation for one window.

    Scores are computed per chunk of query rows when sampled, so the full
    ``hw x hw`` volume never exists at once.
    """

    def __init__(self, query_feat, frame_feats, levels, radius, chunk_rows=DEFAULT_CHUNK_ROWS):
        d, h, w = query_feat.shape
        if frame_feats.shape[1] != d:
            raise DimensionError(
                f"query has {d} channels, frames have {frame_feats.shape[1]}", axis=1
            )
        self.query_feat = query_feat
        self.levels = build_pyramid(frame_feats, levels)
        self.radius = radius
        self.height, self.width = h, w
        self.chunk_rows = max(1, int(chunk_rows))
        self.offsets = patch_offsets(radius)
        self._cells = transpose(reshape(query_feat, (d, h * w)), (1, 0))

    @property
    def channels(self):
        return len(self.levels) * len(self.offsets)

    def scores(self, level, rows=None):
        """Heatmaps ``[S, n, h_l, w_l]`` for the query cells in ``rows``."""
        rows = rows or slice(0, self.height)
        cells = self._cells[rows.start * self.width:rows.stop * self.width]
        return correlate(cells, self.levels[level])

    def sample(self, positions):
        """Patch vectors ``[S, L*(2R+1)^2, h, w]`` around ``positions``.

        ``positions`` is ``[S, 2, h, w]`` holding (x, y) in level-0 cells.
        """
        s = positions.shape[0]
        h, w = self.height, self.width
        if positions.shape[1:] != (2, h, w) or s != self.levels[0].shape[0]:
            raise DimensionError(
                f"positions {positions.shape} do not match window grid ({s},2,{h},{w})", axis=0
            )
        k = len(self.offsets)
        chunks = []
        for r0 in range(0, h, self.chunk_rows):
            rows = slice(r0, min(h, r0 + self.chunk_rows))
            n = (rows.stop - rows.start) * w
            pts = transpose(reshape(positions[:, :, rows, :], (s, 2, n)), (0, 2, 1))
            per_level = []
            for level in range(len(self.levels)):
                heat = self.scores(level, rows)
                _, _, hl, wl = heat.shape
                heat = reshape(heat, (s * n, 1, hl, wl))
                grid = reshape(pts * (1.0 / 2 ** level), (s * n, 1, 2)) + self.offsets[None]
                sampled = bilinear_sample_batched(heat, grid)
                per_level.append(reshape(sampled, (s, n, k)))
            chunks.append(concat(per_level, axis=2))
        patches = concat(chunks, axis=1)
        return reshape(transpose(patches, (0, 2, 1)), (s, self.channels, h, w))


def sample_patch(score_levels, position, radius):
    """Patch vector for one query cell at one timestep.

    ``score_levels`` holds one ``[h_l, w_l]`` heatmap per level; ``position``
    is (x, y) in level-0 cells. Returns a length ``L*(2R+1)^2`` tensor.
    """
    offsets = patch_offsets(radius)
    pos = reshape(as_tensor(position, as_tensor(score_levels[0])), (1, 2))
    parts = []
    for level, heat in enumerate(score_levels):
        heat = as_tensor(heat)
        grid = pos * (1.0 / 2 ** level) + offsets
        parts.append(reshape(bilinear_sample(reshape(heat, (1,) + heat.shape), grid), (-1,)))
    return concat(parts, axis=0)
