"""Sliding-window inference over whole videos and the assembled model."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import expit

from .correlation import CorrPyramid
from .encoder import STRIDE, build_encoder, encode_frames, pad_to_stride, split_context_hidden, tile_query
from .errors import ArgumentError, PlanError
from .layers import Module, count_parameters
from .refiner import Refiner, TrackState, window_context
from .supervision import sample_sparse
from .tensor import Tensor, getitem, no_grad


@dataclass
class WindowPlan:
    starts: List[int]
    window: int
    stride: int
    total: int
    query_index: int
    padded: bool = False

    def valid_length(self, start):
        """Real (non-padded) frames in the window starting at ``start``."""
        return min(self.window, self.total - start)

    def final_frames(self, i):
        """Frames whose estimate is final once window ``i`` has run."""
        start = self.starts[i]
        stop = self.starts[i + 1] if i + 1 < len(self.starts) else start + self.valid_length(start)
        return range(start, stop)


@dataclass
class TrackerOutput:
    """``[T, H, W, 4]``: flow x, flow y, visibility, confidence."""

    result: np.ndarray
    query_index: int = 0
    frame_indices: List[int] = field(default_factory=list)

    @property
    def flow(self):
        return self.result[..., :2]

    @property
    def visibility(self):
        return self.result[..., 2]

    @property
    def confidence(self):
        return self.result[..., 3]


@dataclass
class SampledTracks:
    tracks: np.ndarray
    visibility: np.ndarray
    confidence: np.ndarray


# ---------------------------------------------------------------------------
# window schedule and state hand-over
# ---------------------------------------------------------------------------


def plan_windows(total, window, query_index):
    """Window starts from ``query_index`` at stride ``window // 2``.

    A window that would run past the end is replaced by one ending exactly at
    the last frame. Videos shorter than one window get a single padded window.
    """
    if total < 1:
        raise ArgumentError(f"video needs at least one frame, got T={total}")
    if window < 2 or window % 2:
        raise ArgumentError(f"window length must be even and >= 2, got {window}")
    if not 0 <= query_index < total:
        raise ArgumentError(f"query_index {query_index} outside [0, {total})")
    stride = window // 2
    if total - query_index <= window:
        return WindowPlan(
            [query_index], window, stride, total, query_index,
            padded=total - query_index < window,
        )
    starts = [query_index]
    while starts[-1] + window < total:
        nxt = starts[-1] + stride
        if nxt + window > total:
            nxt = total - window
        starts.append(nxt)
    return WindowPlan(starts, window, stride, total, query_index)


def init_first_window(h, w, length, hidden_init):
    """Zero flow and logits; the hidden state is the query hidden map tiled."""
    dtype = hidden_init.dtype
    return TrackState(
        Tensor(np.zeros((length, 2, h, w), dtype=dtype)),
        Tensor(np.zeros((length, 1, h, w), dtype=dtype)),
        Tensor(np.zeros((length, 1, h, w), dtype=dtype)),
        tile_query(hidden_init, length),
    )


def carry_state(prev, prev_start, next_start):
    """Seed the next window with the overlapping estimates, copying the last one forward."""
    length = prev.length
    shift = next_start - prev_start
    if shift <= 0 or shift >= length:
        raise PlanError(
            f"windows at {prev_start} and {next_start} do not overlap (length {length})"
        )
    index = np.concatenate([np.arange(shift, length), np.full(shift, length - 1)])
    return TrackState(
        getitem(prev.flow, index),
        getitem(prev.vis_logit, index),
        getitem(prev.conf_logit, index),
        getitem(prev.hidden, index),
    )


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class DenseTracker(Module):
    """Encoder, projection and refiner assembled into one model."""

    def __init__(self, cfg, rng=None):
        super().__init__()
        cfg.validate()
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.encoder = build_encoder(cfg.backbone, rng)
        self.refiner = Refiner(rng, cfg.refiner)

    def component_counts(self):
        backbone = int(sum(p.tensor.size for p in self.encoder.backbone_parameters()))
        encoder = count_parameters(self.encoder)
        refiner = count_parameters(self.refiner)
        return {
            "backbone": backbone,
            "projection": encoder - backbone,
            "refiner": refiner,
            "total": encoder + refiner,
        }

    def encode(self, frames, workers=1):
        return encode_frames(frames, self.encoder, self.cfg.backbone, workers)

    def forward_window(self, frames, query_feat=None, state=None, iters=None, workers=1,
                       upsample_all=True):
        """Refine one window of ``[S, 3, H, W]`` frames.

        Returns ``(states, maps)``: every refinement step's coarse state and the
        full-resolution ``[S, 4, H, W]`` logit maps (all steps, or only the last
        when ``upsample_all`` is false). Without ``query_feat`` the first frame
        of the window is the query frame.
        """
        feats = self.encode(frames, workers)
        if query_feat is None:
            query_feat = feats[0]
        context, hidden = split_context_hidden(query_feat, self.cfg.backbone.kind)
        s, _, h, w = feats.shape
        if state is None:
            state = init_first_window(h, w, s, hidden)
        rcfg = self.cfg.refiner
        pyramid = CorrPyramid(query_feat, feats, rcfg.corr_levels, rcfg.corr_radius)
        states = self.refiner.refine(state, pyramid, window_context(context, s), iters)
        chosen = states if upsample_all else states[-1:]
        return states, [self.refiner.upsample(st) for st in chosen]

    def forward(self, frames, **kwargs):
        return self.forward_window(frames, **kwargs)


# ---------------------------------------------------------------------------
# video inference
# ---------------------------------------------------------------------------


def window_frames(frames, start, window):
    clip = frames[start:start + window]
    if len(clip) < window:
        tail = np.repeat(clip[-1:], window - len(clip), axis=0)
        clip = np.concatenate([clip, tail], axis=0)
    return clip


def _to_output(maps):
    """``[S, 4, H, W]`` logits -> ``[S, H, W, 4]`` with probabilities."""
    out = np.transpose(maps, (0, 2, 3, 1)).copy()
    out[..., 2:] = expit(out[..., 2:])
    return out


def _initial_frame(h, w, dtype=np.float32):
    frame = np.zeros((h, w, 4), dtype=dtype)
    frame[..., 2:] = 0.5
    return frame


def iter_track(model, frames, query_index, iters=None, workers=1, progress_callback=None):
    """Yield ``(t, [H, W, 4])`` for frames ``query_index..T-1`` as they become final.

    ``frames`` is a ``[T, 3, H, W]`` array in [0, 1] whose sides are multiples
    of 8. Only one window's features and state are alive at a time.
    """
    total = frames.shape[0]
    window = model.cfg.window
    plan = plan_windows(total, window, query_index)
    h, w = frames.shape[2:]
    if total - query_index == 1:
        yield query_index, _initial_frame(h, w, frames.dtype)
        return
    with no_grad():
        query_feat = model.encode(Tensor(frames[query_index:query_index + 1]), workers)[0]
    prev_state, prev_start = None, None
    for i, start in enumerate(plan.starts):
        with no_grad():
            clip = Tensor(window_frames(frames, start, window))
            state = None if prev_state is None else carry_state(prev_state, prev_start, start)
            states, maps = model.forward_window(
                clip, query_feat, state, iters, workers, upsample_all=False
            )
        result = _to_output(maps[-1].data)
        prev_state, prev_start = states[-1], start
        if progress_callback:
            progress_callback(
                f"Window {i + 1}/{len(plan.starts)}", int(100 * (i + 1) / len(plan.starts))
            )
        for t in plan.final_frames(i):
            yield t, result[t - start]


def _track_forward(model, frames, query_index, iters, workers, progress_callback=None):
    total, _, h, w = frames.shape
    result = np.zeros((total - query_index, h, w, 4), dtype=np.float32)
    for t, frame in iter_track(model, frames, query_index, iters, workers, progress_callback):
        result[t - query_index] = frame
    return result


def reverse_track(model, frames, query_index, iters=None, workers=1):
    """Estimates for frames ``[0, query_index)`` by tracking the reversed prefix."""
    frames = np.asarray(frames, dtype=np.float32)
    total, _, h, w = frames.shape
    padded = pad_to_stride(frames, STRIDE)
    if query_index == 0:
        return TrackerOutput(np.zeros((0, h, w, 4), dtype=np.float32), 0, [])
    prefix = padded[query_index::-1]
    backward = _track_forward(model, prefix, 0, iters, workers)
    result = backward[1:][::-1][:, :h, :w]
    return TrackerOutput(np.ascontiguousarray(result), query_index, list(range(query_index)))


def track(model, frames, query_index=0, iters=None, workers=1, progress_callback=None):
    """Dense tracks of every query-frame pixel through all ``T`` frames.

    ``frames`` is ``[T, 3, H, W]`` in [0, 1]; any size is accepted, frames are
    edge-padded to multiples of 8 and the result cropped back.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ArgumentError(f"frames must be [T,3,H,W], got {frames.shape}")
    total, _, h, w = frames.shape
    plan_windows(total, model.cfg.window, query_index)
    padded = pad_to_stride(frames, STRIDE)
    out = np.zeros((total, h, w, 4), dtype=np.float32)
    forward = _track_forward(model, padded, query_index, iters, workers, progress_callback)
    out[query_index:] = forward[:, :h, :w]
    if query_index > 0:
        out[:query_index] = reverse_track(model, frames, query_index, iters, workers).result
    return TrackerOutput(out, query_index, list(range(total)))


def sample_tracks(out, queries):
    """Per-point trajectories from dense output.

    Positions are bilinear in the flow maps; visibility and confidence use
    nearest-pixel lookup.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    _, h, w, _ = out.result.shape
    outside = (queries[:, 0] < 0) | (queries[:, 0] > w - 1) | (queries[:, 1] < 0) | (queries[:, 1] > h - 1)
    if outside.any():
        bad = queries[np.argmax(outside)]
        raise ArgumentError(f"query ({bad[0]}, {bad[1]}) lies outside the {w}x{h} frame")
    dense = np.transpose(out.result, (0, 3, 1, 2)).astype(np.float64)
    with no_grad():
        sampled = sample_sparse(
            Tensor(dense[:, :2]), Tensor(dense[:, 2:3]), Tensor(dense[:, 3:4]), queries
        )
    return SampledTracks(
        sampled.tracks.data.astype(np.float32),
        sampled.visibility.data.astype(np.float32),
        sampled.confidence.data.astype(np.float32),
    )
