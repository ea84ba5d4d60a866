"""Stride-8 frame encoders and query-feature helpers."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError
from .kernels import gelu
from .layers import Conv2d, LayerNorm, LayerScale, Linear, Module, trunc_normal
from .tensor import Tensor, broadcast_to, concat, is_grad_enabled, no_grad, relu, reshape, transpose

STRIDE = 8
KEYS_A = -0.75


@dataclass
class FeatureBundle:
    frame_feats: Tensor
    query_context: Tensor
    query_hidden_init: Tensor


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class ConvNeXtBlock(Module):
    """Depthwise conv -> LN -> Linear(x4) -> GELU -> Linear -> layer scale -> residual."""

    def __init__(self, rng, dim, kernel=7, expansion=4):
        super().__init__()
        self.dwconv = Conv2d(rng, dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = LayerNorm(dim)
        self.pwconv1 = Linear(rng, dim, expansion * dim)
        self.pwconv2 = Linear(rng, expansion * dim, dim)
        self.gamma = LayerScale(dim)

    def forward(self, x):
        y = transpose(self.dwconv(x), (0, 2, 3, 1))
        y = self.gamma(self.pwconv2(gelu(self.pwconv1(self.norm(y)))))
        return x + transpose(y, (0, 3, 1, 2))


class ResidualBlock(Module):
    def __init__(self, rng, in_dim, out_dim, stride=1):
        super().__init__()
        self.conv1 = Conv2d(rng, in_dim, out_dim, 3, stride=stride, padding=1)
        self.norm1 = LayerNorm(out_dim, axis=1)
        self.conv2 = Conv2d(rng, out_dim, out_dim, 3, padding=1)
        self.norm2 = LayerNorm(out_dim, axis=1)
        self.has_skip = stride != 1 or in_dim != out_dim
        if self.has_skip:
            self.skip_conv = Conv2d(rng, in_dim, out_dim, 1, stride=stride)
            self.skip_norm = LayerNorm(out_dim, axis=1)

    def forward(self, x):
        y = relu(self.norm1(self.conv1(x)))
        y = relu(self.norm2(self.conv2(y)))
        if self.has_skip:
            x = self.skip_norm(self.skip_conv(x))
        return relu(x + y)


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.length = len(modules)
        for i, module in enumerate(modules):
            setattr(self, str(i), module)

    def forward(self, x):
        for i in range(self.length):
            x = getattr(self, str(i))(x)
        return x


# ---------------------------------------------------------------------------
# stride conversion
# ---------------------------------------------------------------------------


def _cubic(d, a=KEYS_A):
    d = abs(d)
    if d <= 1.0:
        return (a + 2.0) * d ** 3 - (a + 3.0) * d ** 2 + 1.0
    if d < 2.0:
        return a * (d ** 3 - 5.0 * d ** 2 + 8.0 * d - 4.0)
    return 0.0


def bicubic_matrix(n_in, n_out):
    """``[n_out, n_in]`` resampling matrix; corners aligned, borders clamped."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        t = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        base = int(np.floor(t))
        for offset in range(-1, 3):
            src = min(max(base + offset, 0), n_in - 1)
            mat[i, src] += _cubic(t - (base + offset))
    return mat


def convert_stride2_kernel(weight):
    """Resample ``[O, C, 2, 2]`` kernels onto a 3x3 grid and rescale by 4/9.

    The result covers the same support at stride 1, preserving the kernel's
    total mass for constant kernels.
    """
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ArgumentError(f"convert_stride2_kernel expects [O,C,2,2], got {w.shape}")
    m = bicubic_matrix(2, 3)
    out = np.einsum("ij,ocjk,lk->ocil", m, w.astype(np.float64), m) * (4.0 / 9.0)
    return Tensor(out.astype(w.dtype))


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class ConvNeXtEncoder(Module):
    """First three ConvNeXt stages with the last downsampler run at stride 1."""

    def __init__(self, rng, cfg):
        super().__init__()
        d0, d1, d2 = cfg.dims
        n0, n1, n2 = cfg.block_depths
        self.stem = Conv2d(rng, 3, d0, 4, stride=4)
        self.stem_norm = LayerNorm(d0, axis=1)
        self.stage1 = Sequential(*[ConvNeXtBlock(rng, d0) for _ in range(n0)])
        self.down1_norm = LayerNorm(d0, axis=1)
        self.down1 = Conv2d(rng, d0, d1, 2, stride=2)
        self.stage2 = Sequential(*[ConvNeXtBlock(rng, d1) for _ in range(n1)])
        self.down2_norm = LayerNorm(d1, axis=1)
        self.down2 = Conv2d(rng, d1, d2, 3, padding=1)
        self.down2.weight.data = convert_stride2_kernel(trunc_normal(rng, (d2, d1, 2, 2))).data
        self.stage3 = Sequential(*[ConvNeXtBlock(rng, d2) for _ in range(n2)])
        self.projection = Conv2d(rng, d2, cfg.feature_dim, 1)

    def backbone_parameters(self):
        return [p for p in self.parameters() if not p.name.startswith("projection.")]

    def forward(self, x):
        x = self.stage1(self.stem_norm(self.stem(x)))
        x = self.stage2(self.down1(self.down1_norm(x)))
        x = self.stage3(self.down2(self.down2_norm(x)))
        return self.projection(x)


class BasicEncoder(Module):
    """Residual CNN whose 128-channel output serves as both context and hidden."""

    def __init__(self, rng, cfg):
        super().__init__()
        d0, d1, d2 = cfg.dims
        n0, n1, n2 = cfg.block_depths
        self.conv1 = Conv2d(rng, 3, d0, 7, stride=2, padding=3)
        self.norm1 = LayerNorm(d0, axis=1)
        self.layer1 = self._layer(rng, d0, d0, n0, 1)
        self.layer2 = self._layer(rng, d0, d1, n1, 2)
        self.layer3 = self._layer(rng, d1, d2, n2, 2)
        self.conv2 = Conv2d(rng, d2, cfg.feature_dim, 1)

    @staticmethod
    def _layer(rng, in_dim, out_dim, depth, stride):
        blocks = [ResidualBlock(rng, in_dim, out_dim, stride)]
        blocks += [ResidualBlock(rng, out_dim, out_dim) for _ in range(depth - 1)]
        return Sequential(*blocks)

    def backbone_parameters(self):
        return self.parameters()

    def forward(self, x):
        x = relu(self.norm1(self.conv1(x)))
        x = self.layer3(self.layer2(self.layer1(x)))
        return self.conv2(x)


def build_encoder(cfg, rng):
    cfg.validate()
    if cfg.kind == "basic_tiny":
        return BasicEncoder(rng, cfg)
    return ConvNeXtEncoder(rng, cfg)


# ---------------------------------------------------------------------------
# frame preparation and query helpers
# ---------------------------------------------------------------------------


def normalize_frames(frames, mean, std):
    """Map ``[S, 3, H, W]`` pixels in [0, 1] to zero-mean unit-std inputs."""
    mean = np.asarray(mean, dtype=frames.dtype).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=frames.dtype).reshape(1, 3, 1, 1)
    return (frames - mean) * (1.0 / std)


def pad_to_stride(frames, stride=STRIDE):
    """Edge-pad the spatial axes of a numpy ``[..., H, W]`` array up to a multiple of ``stride``."""
    h, w = frames.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    if ph == 0 and pw == 0:
        return frames
    widths = [(0, 0)] * (frames.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(frames, widths, mode="edge")


def encode_frames(frames, encoder, cfg, workers=1):
    """Encode ``[S, 3, H, W]`` frames into ``[S, D, H/8, W/8]`` features.

    With grad recording disabled and ``workers > 1`` frames are encoded
    concurrently.
    """
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ArgumentError(f"frames must be [S,3,H,W], got {frames.shape}")
    h, w = frames.shape[2:]
    if h % STRIDE or w % STRIDE:
        raise ArgumentError(f"frame size {h}x{w} is not divisible by {STRIDE}; pad first")
    x = normalize_frames(frames, cfg.mean, cfg.std)
    if workers <= 1 or is_grad_enabled() or x.shape[0] == 1:
        return encoder(x)

    def _one(i):
        with no_grad():
            return encoder(x[i:i + 1])

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_one, range(x.shape[0])))
    return concat(parts, axis=0)


def split_context_hidden(query_feat, kind="convnext_main"):
    """Split ``[D, h, w]`` query features into (context, hidden)."""
    if kind == "basic_tiny":
        return query_feat, query_feat
    d = query_feat.shape[0]
    if d % 2:
        raise ConfigError(f"feature dim {d} is odd; cannot split context/hidden", field="feature_dim")
    return query_feat[: d // 2], query_feat[d // 2:]


def tile_query(query_feat, length):
    """Repeat ``[D, h, w]`` into ``[S, D, h, w]``."""
    if length < 1:
        raise ArgumentError(f"window length must be >= 1, got {length}")
    return broadcast_to(reshape(query_feat, (1,) + query_feat.shape), (length,) + query_feat.shape)


def encode_query(frames, query_index, encoder, cfg):
    """Encode the query frame once and split it into a :class:`FeatureBundle` seed."""
    feat = encode_frames(frames[query_index:query_index + 1], encoder, cfg)
    query_feat = feat[0]
    context, hidden = split_context_hidden(query_feat, cfg.kind)
    return query_feat, context, hidden
