"""Point-tracking metrics measured at 256x256 and dense endpoint error."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError

THRESHOLDS = (1, 2, 4, 8, 16)
EVAL_SIZE = 256
VIS_THRESHOLD = 0.5
PROTOCOLS = ("strided", "first")
SCORED_FRAMES = {
    "strided": "every frame except the query frame",
    "first": "frames after the query frame",
}


@dataclass
class EvalRecord:
    """One video's predictions and labels; arrays are ``[T, N]`` / ``[T, N, 2]``."""

    pred_tracks: np.ndarray
    pred_vis: np.ndarray
    gt_tracks: np.ndarray
    gt_vis: np.ndarray
    valid: np.ndarray
    height: int
    width: int
    query_index: int = 0

    def __post_init__(self):
        self.pred_tracks = np.asarray(self.pred_tracks, dtype=np.float64)
        self.gt_tracks = np.asarray(self.gt_tracks, dtype=np.float64)
        self.pred_vis = np.asarray(self.pred_vis, dtype=np.float64) >= VIS_THRESHOLD
        self.gt_vis = np.asarray(self.gt_vis).astype(bool)
        self.valid = np.asarray(self.valid).astype(bool)
        if self.pred_tracks.shape != self.gt_tracks.shape:
            raise DimensionError(
                f"prediction {self.pred_tracks.shape} vs ground truth {self.gt_tracks.shape}", axis=0
            )
        if self.pred_tracks.shape[:2] != self.gt_vis.shape:
            raise DimensionError("visibility and track arrays disagree on [T, N]", axis=1)

    def scaled_error(self):
        """Euclidean error after rescaling coordinates to 256x256."""
        scale = np.array([EVAL_SIZE / self.width, EVAL_SIZE / self.height])
        diff = (self.pred_tracks - self.gt_tracks) * scale
        return np.sqrt((diff ** 2).sum(axis=-1))

    def mask(self, protocol="strided"):
        """Frames that count: all but the query frame, or only later frames for ``first``."""
        if protocol not in PROTOCOLS:
            raise ArgumentError(f"Unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
        frames = np.arange(self.valid.shape[0])[:, None]
        keep = frames > self.query_index if protocol == "first" else frames != self.query_index
        return self.valid & keep


def _ratio(num, den):
    return None if den == 0 else 100.0 * num / den


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def delta_k(records, k, protocol="strided"):
    """Percent of gt-visible points within ``k`` px, averaged over videos."""
    if k <= 0:
        raise ArgumentError(f"threshold k must be positive, got {k}")
    per_video = []
    for rec in records:
        m = rec.mask(protocol) & rec.gt_vis
        per_video.append(_ratio(int((rec.scaled_error()[m] < k).sum()), int(m.sum())))
    return _mean(per_video)


def delta_avg(records, protocol="strided"):
    values = [delta_k(records, k, protocol) for k in THRESHOLDS]
    return None if any(v is None for v in values) else float(np.mean(values))


def occlusion_accuracy(records, protocol="strided"):
    per_video = []
    for rec in records:
        m = rec.mask(protocol)
        per_video.append(_ratio(int((rec.pred_vis == rec.gt_vis)[m].sum()), int(m.sum())))
    return _mean(per_video)


def jaccard_counts(rec, k, protocol="strided"):
    """(TP, FP, FN) at threshold ``k`` for one record."""
    m = rec.mask(protocol)
    within = rec.scaled_error() < k
    hit = rec.gt_vis & rec.pred_vis & within
    tp = int((hit & m).sum())
    fp = int((rec.pred_vis & ~hit & m).sum())
    fn = int((rec.gt_vis & ~hit & m).sum())
    return tp, fp, fn


def jaccard_k(records, k, protocol="strided"):
    per_video = []
    for rec in records:
        tp, fp, fn = jaccard_counts(rec, k, protocol)
        per_video.append(_ratio(tp, tp + fp + fn))
    return _mean(per_video)


def average_jaccard(records, protocol="strided"):
    values = [jaccard_k(records, k, protocol) for k in THRESHOLDS]
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def compute_metrics(records, protocol="strided"):
    """All tracking metrics as a flat ``{name: percent or None}`` dict.

    Under the default ``strided`` protocol the query frame itself is not
    scored, so every mean runs over gt-visible valid points of the other
    frames. ``first`` further drops frames before the query frame.
    """
    records = list(records)
    out = {}
    for k in THRESHOLDS:
        out[f"delta_{k}"] = delta_k(records, k, protocol)
    out["delta_avg"] = delta_avg(records, protocol)
    out["occlusion_accuracy"] = occlusion_accuracy(records, protocol)
    for k in THRESHOLDS:
        out[f"jaccard_{k}"] = jaccard_k(records, k, protocol)
    out["average_jaccard"] = average_jaccard(records, protocol)
    return out


def endpoint_error(pred_flow, gt_flow, valid=None):
    """Mean and median EPE over ``[..., 2]`` flow fields (optionally masked)."""
    pred = np.asarray(pred_flow, dtype=np.float64)
    gt = np.asarray(gt_flow, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise DimensionError(f"flow shapes {pred.shape} and {gt.shape} must match with 2 channels", axis=-1)
    epe = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    if valid is not None:
        epe = epe[np.asarray(valid).astype(bool)]
    if epe.size == 0:
        return {"mean": None, "median": None, "count": 0}
    return {"mean": float(epe.mean()), "median": float(np.median(epe)), "count": int(epe.size)}
