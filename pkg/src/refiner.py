"""Recurrent refinement of flow, visibility and confidence for one window."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ConvNeXtBlock, tile_query
from .errors import ConfigError, DimensionError
from .kernels import gelu, multi_head_attention, sigmoid, softmax
from .layers import Conv2d, LayerNorm, LayerScale, Linear, Module
from .tensor import Tensor, add, concat, make_result, pad, reshape, stack, transpose

STRIDE = 8
UPSAMPLE_SLOTS = STRIDE * STRIDE
NEIGHBORS = 9
UPSAMPLE_LOGIT_SCALE = 0.25


@dataclass
class TrackState:
    """Coarse estimates for a window; flow is in full-resolution pixels."""

    flow: Tensor
    vis_logit: Tensor
    conf_logit: Tensor
    hidden: Tensor

    @property
    def length(self):
        return self.flow.shape[0]

    def detach(self):
        return TrackState(
            self.flow.detach(), self.vis_logit.detach(), self.conf_logit.detach(), self.hidden.detach()
        )


def coords_grid(h, w, dtype=np.float32):
    """``[2, h, w]`` meshgrid; channel 0 is x (column), channel 1 is y (row)."""
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.stack([xs, ys])


def positions_of(state):
    """Current positions ``[S, 2, h, w]`` in coarse-cell units."""
    _, _, h, w = state.flow.shape
    return state.flow * (1.0 / STRIDE) + coords_grid(h, w, state.flow.dtype)[None]


def sinusoidal_embedding(length, channels):
    """``[length, channels]`` interleaved sin/cos embedding of frame offsets."""
    if channels % 2:
        raise ConfigError(f"embedding width {channels} must be even", field="hidden_dim")
    pairs = channels // 2
    freqs = 1.0 / (10000.0 ** (np.arange(pairs, dtype=np.float64) * 2.0 / channels))
    angles = np.arange(length, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.empty((length, channels), dtype=np.float64)
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb


def window_context(context, length):
    """Tile ``[C, h, w]`` context over the window and add the temporal embedding."""
    emb = sinusoidal_embedding(length, context.shape[0]).astype(context.dtype)
    return tile_query(context, length) + emb[:, :, None, None]


# ---------------------------------------------------------------------------
# sub-modules
# ---------------------------------------------------------------------------


class RefinerInputEncoder(Module):
    """Parallel correlation/motion stems merged with vis, conf and appearance."""

    def __init__(self, rng, cfg):
        super().__init__()
        self.cfg = cfg
        c0, c1 = cfg.corr_dims
        m0, m1 = cfg.motion_dims
        self.corr_conv1 = Conv2d(rng, cfg.corr_channels, c0, 3, padding=1)
        self.corr_conv2 = Conv2d(rng, c0, c1, 3, padding=1)
        self.motion_conv1 = Conv2d(rng, 2, m0, 3, padding=1)
        self.motion_conv2 = Conv2d(rng, m0, m1, 3, padding=1)
        self.merge1 = Conv2d(rng, c1 + m1, cfg.merge_dim, 1)
        self.merge2 = Conv2d(rng, cfg.merge_dim + 2 + 2 * cfg.hidden_dim, cfg.width, 1)

    @property
    def input_channels(self):
        return self.cfg.corr_channels + 2 + 2 + 2 * self.cfg.hidden_dim

    def forward(self, corr, motion, vis, conf, appearance):
        if corr.shape[1] != self.cfg.corr_channels:
            raise ConfigError(
                f"correlation field has {corr.shape[1]} channels, expected {self.cfg.corr_channels}",
                field="refiner.corr_levels",
            )
        if appearance.shape[1] != 2 * self.cfg.hidden_dim:
            raise ConfigError(
                f"appearance features have {appearance.shape[1]} channels, "
                f"expected {2 * self.cfg.hidden_dim}",
                field="refiner.hidden_dim",
            )
        c = gelu(self.corr_conv2(gelu(self.corr_conv1(corr))))
        m = gelu(self.motion_conv2(gelu(self.motion_conv1(motion))))
        merged = gelu(self.merge1(concat([c, m], axis=1)))
        return self.merge2(concat([merged, vis, conf, appearance], axis=1))


class Attention(Module):
    def __init__(self, rng, dim, heads):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by heads={heads}", field="refiner.heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def forward(self, x, return_weights=False):
        return multi_head_attention(
            x,
            self.q.weight, self.q.bias,
            self.k.weight, self.k.bias,
            self.v.weight, self.v.bias,
            self.out.weight, self.out.bias,
            self.heads,
            return_weights=return_weights,
        )


class SpaceTimeBlock(Module):
    """Per-frame ConvNeXt block followed by per-pixel attention over time."""

    def __init__(self, rng, dim, kernel=7, heads=8, expansion=4):
        super().__init__()
        self.conv_block = ConvNeXtBlock(rng, dim, kernel, expansion)
        self.spatial_proj = Linear(rng, dim, dim)
        self.attn_norm = LayerNorm(dim)
        self.attn = Attention(rng, dim, heads)
        self.attn_scale = LayerScale(dim)
        self.mlp_norm = LayerNorm(dim)
        self.mlp_fc1 = Linear(rng, dim, expansion * dim)
        self.mlp_fc2 = Linear(rng, expansion * dim, dim)
        self.mlp_scale = LayerScale(dim)
        self.temporal_proj = Linear(rng, dim, dim)

    def spatial(self, x):
        y = transpose(self.conv_block(x), (0, 2, 3, 1))
        return transpose(self.spatial_proj(y), (0, 3, 1, 2))

    def temporal(self, x):
        s, c, h, w = x.shape
        tokens = reshape(transpose(x, (2, 3, 0, 1)), (h * w, s, c))
        tokens = tokens + self.attn_scale(self.attn(self.attn_norm(tokens)))
        tokens = tokens + self.mlp_scale(self.mlp_fc2(gelu(self.mlp_fc1(self.mlp_norm(tokens)))))
        tokens = self.temporal_proj(tokens)
        return transpose(reshape(tokens, (h, w, s, c)), (2, 3, 0, 1))

    def forward(self, x):
        return self.temporal(self.spatial(x))


def space_time_block(block, x):
    return block(x)


# ---------------------------------------------------------------------------
# revisions and upsampling
# ---------------------------------------------------------------------------


def apply_revisions(state, revisions):
    """Add flow/logit revisions; the hidden state is replaced."""
    d_flow, d_vis, d_conf, new_hidden = revisions
    if d_flow.shape != state.flow.shape:
        raise DimensionError(f"flow revision {d_flow.shape} vs state {state.flow.shape}", axis=1)
    return TrackState(
        add(state.flow, d_flow),
        add(state.vis_logit, d_vis),
        add(state.conf_logit, d_conf),
        new_hidden,
    )


def _neighborhoods(field):
    """``[S, C, 9, h, w]`` edge-padded 3x3 neighborhoods, row-major."""
    _, _, h, w = field.shape
    padded = pad(field, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    return stack(
        [padded[:, :, ky:ky + h, kx:kx + w] for ky in range(3) for kx in range(3)], axis=2
    )


def _convex_combine(neighbors, weights):
    out = np.einsum("skpij,sckij->scpij", weights.data, neighbors.data, optimize=True)

    def _backward(g):
        g_nb = np.einsum("scpij,skpij->sckij", g, weights.data, optimize=True)
        g_w = np.einsum("scpij,sckij->skpij", g, neighbors.data, optimize=True)
        return g_nb, g_w

    return make_result(out, (neighbors, weights), _backward)


def convex_upsample(field, weights):
    """Upsample ``[S, C, h, w]`` by 8 with per-pixel convex 3x3 weights.

    ``weights`` is ``[S, 576, h, w]`` from :meth:`Refiner.decode_upsample_weights`;
    channel ``k * 64 + (fy * 8 + fx)`` weights neighbor ``k`` for fine pixel
    ``(fy, fx)`` of the cell.
    """
    s, c, h, w = field.shape
    if weights.shape != (s, NEIGHBORS * UPSAMPLE_SLOTS, h, w):
        raise DimensionError(f"upsample weights {weights.shape} do not match field {field.shape}", axis=1)
    mask = reshape(weights, (s, NEIGHBORS, UPSAMPLE_SLOTS, h, w))
    fine = _convex_combine(_neighborhoods(field), mask)
    fine = reshape(fine, (s, c, STRIDE, STRIDE, h, w))
    return reshape(transpose(fine, (0, 1, 4, 2, 5, 3)), (s, c, STRIDE * h, STRIDE * w))


# ---------------------------------------------------------------------------
# the refiner
# ---------------------------------------------------------------------------


class Refiner(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.inputs = RefinerInputEncoder(rng, cfg)
        if cfg.share_blocks:
            self.block = SpaceTimeBlock(rng, cfg.width, cfg.kernel, cfg.heads, cfg.expansion)
            self.blocks = [self.block] * cfg.n_blocks
        else:
            self.blocks = []
            for i in range(cfg.n_blocks):
                block = SpaceTimeBlock(rng, cfg.width, cfg.kernel, cfg.heads, cfg.expansion)
                setattr(self, f"block{i}", block)
                self.blocks.append(block)
        self.head = Conv2d(rng, cfg.width, cfg.hidden_dim + 4, 1)
        self.head.weight.data[cfg.hidden_dim:] = 0.0
        self.upsample_conv1 = Conv2d(rng, cfg.hidden_dim, cfg.width, 3, padding=1)
        self.upsample_conv2 = Conv2d(rng, cfg.width, NEIGHBORS * UPSAMPLE_SLOTS, 1)

    def encode_inputs(self, state, corr, context):
        appearance = concat([context, state.hidden], axis=1)
        return self.inputs(
            corr, state.flow, sigmoid(state.vis_logit), sigmoid(state.conf_logit), appearance
        )

    def decode_revisions(self, x):
        """Split the 132-channel head into (d_flow, d_vis, d_conf, hidden)."""
        out = self.head(x)
        hd = self.cfg.hidden_dim
        return out[:, hd:hd + 2], out[:, hd + 2:hd + 3], out[:, hd + 3:hd + 4], out[:, :hd]

    def decode_upsample_weights(self, hidden):
        """``[S, 576, h, w]`` weights, softmax-normalized over the 9 neighbors."""
        logits = self.upsample_conv2(gelu(self.upsample_conv1(hidden))) * UPSAMPLE_LOGIT_SCALE
        s, _, h, w = logits.shape
        weights = softmax(reshape(logits, (s, NEIGHBORS, UPSAMPLE_SLOTS, h, w)), axis=1)
        return reshape(weights, (s, NEIGHBORS * UPSAMPLE_SLOTS, h, w))

    def step(self, state, pyramid, context):
        corr = pyramid.sample(positions_of(state))
        x = self.encode_inputs(state, corr, context)
        for block in self.blocks:
            x = space_time_block(block, x)
        return apply_revisions(state, self.decode_revisions(x))

    def refine(self, state, pyramid, context, iters=None):
        """Run ``iters`` weight-shared refinement steps; returns every state.

        ``context`` is the window-tiled ``[S, C, h, w]`` context (see
        :func:`window_context`).
        """
        iters = self.cfg.iters if iters is None else iters
        if iters < 1:
            raise ConfigError(f"iters must be >= 1, got {iters}", field="refiner.iters")
        states = []
        for _ in range(iters):
            state = self.step(state, pyramid, context)
            states.append(state)
        return states

    def upsample(self, state):
        """Full-resolution ``[S, 4, 8h, 8w]`` (flow x, flow y, vis logit, conf logit)."""
        weights = self.decode_upsample_weights(state.hidden)
        field = concat([state.flow, state.vis_logit, state.conf_logit], axis=1)
        return convex_upsample(field, weights)

    def forward(self, state, pyramid, context, iters=None):
        return self.refine(state, pyramid, context, iters)
