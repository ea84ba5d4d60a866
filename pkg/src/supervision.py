"""Training losses and sparse sampling of dense predictions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import bilinear_sample_batched, sigmoid
from .tensor import Tensor, add, clip, getitem, log, tabs, tsum


@dataclass
class LossWeights:
    alpha: float = 0.05
    gamma: float = 0.8
    occluded_weight: float = 0.2
    conf_threshold: float = 12.0
    bce_eps: float = 1e-6


@dataclass
class GroundTruth:
    """Sparse labels for one window; ``visibility`` is None for flow-only data."""

    queries: np.ndarray
    tracks: np.ndarray
    valid: np.ndarray
    visibility: Optional[np.ndarray] = None

    @property
    def labeled(self):
        return self.visibility is not None


@dataclass
class SparsePrediction:
    tracks: Tensor
    visibility: Tensor
    confidence: Tensor
    kept: np.ndarray

    @property
    def excluded(self):
        return int((~self.kept).sum())


@dataclass
class LossBreakdown:
    total: Tensor
    track: Tensor
    vis: Tensor
    conf: Tensor

    def as_floats(self):
        return {k: getattr(self, k).item() for k in ("total", "track", "vis", "conf")}


def round_half_away(x):
    """Nearest integer; ties go away from zero."""
    x = np.asarray(x)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def step_weights(iters, gamma):
    """``gamma ** (K - k)`` for k = 1..K."""
    return [gamma ** (iters - k) for k in range(1, iters + 1)]


def sample_sparse(flow, vis, conf, queries):
    """Sample dense ``[S, 2|1, H, W]`` maps at query-frame pixels.

    Trajectories are the query plus the bilinearly sampled flow; visibility
    and confidence are read from the nearest pixel. Queries outside the frame
    are dropped (see ``kept``) with a warning.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    s, _, h, w = flow.shape
    kept = (
        (queries[:, 0] >= 0) & (queries[:, 0] <= w - 1) & (queries[:, 1] >= 0) & (queries[:, 1] <= h - 1)
    )
    if not kept.all():
        warnings.warn(
            f"{int((~kept).sum())} query point(s) outside the {w}x{h} frame were excluded",
            RuntimeWarning,
            stacklevel=2,
        )
    pts = queries[kept]
    coords = np.broadcast_to(pts.astype(flow.dtype), (s,) + pts.shape).copy()
    tracks = add(bilinear_sample_batched(flow, coords), coords)
    ix = np.clip(round_half_away(pts[:, 0]), 0, w - 1)
    iy = np.clip(round_half_away(pts[:, 1]), 0, h - 1)
    index = (slice(None), 0, iy, ix)
    return SparsePrediction(tracks, getitem(vis, index), getitem(conf, index), kept)


def _valid_count(valid):
    return float(np.asarray(valid, dtype=np.float64).sum())


def _zero(like):
    return Tensor(np.zeros((), dtype=like.dtype))


def track_loss(preds, gt_tracks, valid, gt_vis=None, weights=None):
    """Weighted L1 trajectory loss over refinement steps.

    ``preds`` holds K ``[S, N, 2]`` predictions; each step is averaged over
    valid points with visible points weighted 1 and occluded ones
    ``occluded_weight``, then scaled by ``alpha * gamma ** (K - k)``.
    """
    weights = weights or LossWeights()
    valid = np.asarray(valid, dtype=preds[0].dtype)
    count = _valid_count(valid)
    if count == 0:
        warnings.warn("track_loss: no valid points; returning 0", RuntimeWarning, stacklevel=2)
        return _zero(preds[0])
    if gt_vis is None:
        point_w = valid
    else:
        vis = np.asarray(gt_vis, dtype=valid.dtype)
        point_w = valid * (vis + weights.occluded_weight * (1.0 - vis))
    target = np.asarray(gt_tracks, dtype=valid.dtype)
    total = None
    for pred, scale in zip(preds, step_weights(len(preds), weights.gamma)):
        l1 = tsum(tabs(pred - target), axis=-1)
        term = tsum(l1 * point_w) * (weights.alpha * scale / count)
        total = term if total is None else total + term
    return total


def _bce(probs, target, valid, eps):
    p = clip(probs, eps, 1.0 - eps)
    nll = -(log(p) * target + log(1.0 - p) * (1.0 - target))
    return tsum(nll * valid) * (1.0 / _valid_count(valid))


def vis_loss(vis_probs, gt_vis, valid, weights=None):
    """Sum over steps of the mean BCE between visibility probabilities and labels."""
    weights = weights or LossWeights()
    if gt_vis is None or _valid_count(valid) == 0:
        return _zero(vis_probs[0])
    valid = np.asarray(valid, dtype=vis_probs[0].dtype)
    target = np.asarray(gt_vis, dtype=valid.dtype)
    total = None
    for probs in vis_probs:
        term = _bce(probs, target, valid, weights.bce_eps)
        total = term if total is None else total + term
    return total


def conf_targets(pred, gt_tracks, threshold):
    """1 where the prediction lies strictly within ``threshold`` px of the label."""
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    err = np.linalg.norm(data - np.asarray(gt_tracks, dtype=data.dtype), axis=-1)
    return (err < threshold).astype(data.dtype)


def conf_loss(conf_probs, preds, gt_tracks, valid, weights=None):
    """Sum over steps of BCE against per-step "within threshold" targets."""
    weights = weights or LossWeights()
    if _valid_count(valid) == 0:
        return _zero(conf_probs[0])
    valid = np.asarray(valid, dtype=conf_probs[0].dtype)
    total = None
    for probs, pred in zip(conf_probs, preds):
        target = conf_targets(pred, gt_tracks, weights.conf_threshold)
        term = _bce(probs, target, valid, weights.bce_eps)
        total = term if total is None else total + term
    return total


def compute_losses(maps, gt, weights=None):
    """Losses for K full-resolution ``[S, 4, H, W]`` logit maps against sparse labels."""
    weights = weights or LossWeights()
    tracks, vis_p, conf_p = [], [], []
    kept = None
    for m in maps:
        sparse = sample_sparse(m[:, 0:2], m[:, 2:3], m[:, 3:4], gt.queries)
        tracks.append(sparse.tracks)
        vis_p.append(sigmoid(sparse.visibility))
        conf_p.append(sigmoid(sparse.confidence))
        kept = sparse.kept
    gt_tracks = gt.tracks[:, kept]
    valid = gt.valid[:, kept]
    gt_vis = gt.visibility[:, kept] if gt.labeled else None
    track = track_loss(tracks, gt_tracks, valid, gt_vis, weights)
    if gt.labeled:
        vis = vis_loss(vis_p, gt_vis, valid, weights)
        conf = conf_loss(conf_p, tracks, gt_tracks, valid, weights)
    else:
        vis, conf = _zero(track), _zero(track)
    return LossBreakdown(track + vis + conf, track, vis, conf)
