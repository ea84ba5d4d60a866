"""Desk-scale training on synthetic sprite videos.

Each step draws one sample from a seed derived from the run seed and the step
number. A ``flow_fraction`` share of steps are two-frame flow samples with
dense, visibility-free labels; the rest are multi-frame track samples with
augmentation. Both go through the same model without reconfiguration.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd

from .checkpoint import save_checkpoint
from .config import save_config
from .errors import TrainingError
from .metrics import EvalRecord, compute_metrics, endpoint_error
from .optim import AdamW, clip_grad_norm, learning_rate
from .supervision import GroundTruth, LossBreakdown, compute_losses
from .synthdata import AugmentParams, MotionRanges, augment, generate, render_scene, translating_scene
from .tensor import Tensor, backward, no_grad
from .tracker import DenseTracker, carry_state, plan_windows, sample_tracks, track, window_frames
from .utils import ensure_output_folder, generate_output_filename, generate_run_name

LOSS_COLUMNS = ["step", "batch_seed", "kind", "frames", "total", "track", "vis", "conf", "lr", "grad_norm"]
CHECKPOINT_PREFIX = "model"


@dataclass
class Batch:
    kind: str
    seed: int
    video: np.ndarray
    gt: GroundTruth

    @property
    def num_frames(self):
        return self.video.shape[0]


@dataclass
class TrainResult:
    model: DenseTracker
    history: pd.DataFrame
    run_dir: Path
    checkpoints: List[Path] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def batch_seed(run_seed, step):
    """Seed for the sample drawn at ``step``; independent of everything else."""
    return int(np.random.SeedSequence([int(run_seed), int(step)]).generate_state(1)[0])


def _motion(data):
    return MotionRanges(
        max_speed=data.max_speed,
        max_rotation=data.max_rotation,
        max_zoom=data.max_zoom,
        background_speed=data.max_speed / 2,
    )


def flow_label_stride(data):
    """Grid stride giving roughly ``n_tracks`` dense-flow labels per sample."""
    return max(1, int(math.sqrt(data.height * data.width / max(1, data.n_tracks))))


def make_batch(cfg, step):
    """The sample for ``step``: a 2-frame flow pair or an augmented track clip."""
    data = cfg.data
    seed = batch_seed(cfg.seed, step)
    rng = np.random.default_rng(seed)
    n_sprites = int(rng.integers(data.n_sprites[0], data.n_sprites[1] + 1))
    if rng.random() < data.flow_fraction:
        sample = generate(seed, 2, data.height, data.width, n_sprites, _motion(data), data.n_tracks)
        params = AugmentParams(data.shift, data.scale_range, data.color_jitter, 0, tuple(data.occluder_size))
        sample = augment(sample, seed + 1, params)
        return Batch("flow", seed, sample.video, sample.flow_ground_truth(flow_label_stride(data)))
    frames = int(rng.integers(data.min_frames, data.max_frames + 1))
    sample = generate(seed, frames, data.height, data.width, n_sprites, _motion(data), data.n_tracks)
    sample = augment(sample, seed + 1, AugmentParams.from_data_config(data))
    return Batch("track", seed, sample.video, sample.ground_truth(labeled=True))


def _window_truth(gt, start, length):
    return GroundTruth(
        queries=gt.queries,
        tracks=gt.tracks[start:start + length],
        valid=gt.valid[start:start + length],
        visibility=None if gt.visibility is None else gt.visibility[start:start + length],
    )


def batch_losses(model, batch, weights, iters=None, workers=1):
    """Losses of one sample, averaged over its sliding windows.

    Clips no longer than the model window run as a single window of their own
    length. Longer clips follow the inference schedule, with each window
    seeded by the detached estimates of the previous one. Returns the
    breakdown and each window's list of per-step logit maps.
    """
    video = batch.video.astype(np.float32)
    total = video.shape[0]
    window = model.cfg.window
    if total <= window:
        _, maps = model.forward_window(Tensor(video), iters=iters, workers=workers)
        return compute_losses(maps, batch.gt, weights), [maps]
    query_feat = model.encode(Tensor(video[:1]), workers)[0]
    plan = plan_windows(total, window, 0)
    parts, all_maps = [], []
    prev, prev_start = None, None
    for start in plan.starts:
        state = None if prev is None else carry_state(prev.detach(), prev_start, start)
        clip = Tensor(window_frames(video, start, window))
        states, maps = model.forward_window(clip, query_feat, state, iters, workers)
        n = plan.valid_length(start)
        maps = [m[:n] for m in maps]
        parts.append(compute_losses(maps, _window_truth(batch.gt, start, n), weights))
        all_maps.append(maps)
        prev, prev_start = states[-1], start
    scale = 1.0 / len(parts)
    combined = [sum((getattr(p, name) for p in parts[1:]), getattr(parts[0], name)) * scale
                for name in ("total", "track", "vis", "conf")]
    return LossBreakdown(*combined), all_maps


def _resolve_run_dir(cfg, output_dir):
    if output_dir is not None:
        return Path(ensure_output_folder(str(output_dir)))
    return Path(ensure_output_folder(os.path.join(cfg.output_dir, generate_run_name("train"))))


def train(cfg, output_dir=None, progress_callback=None, model=None):
    """Optimize a model on synthetic batches and write checkpoints and loss curves.

    Writes ``config.json``, ``loss_curve.csv``, ``train_summary.json`` and
    ``model_<step>.atkpt`` files to the run directory. Raises
    :class:`TrainingError` carrying the batch seed when the loss is not finite.
    """
    cfg.validate()
    workers = 1 if cfg.reference_mode else cfg.workers
    model = model or DenseTracker(cfg.model, np.random.default_rng(cfg.seed))
    params = list(model.parameters())
    optim_cfg = cfg.optim
    optimizer = AdamW(params, optim_cfg.lr, optim_cfg.betas, optim_cfg.eps, optim_cfg.weight_decay)
    run_dir = _resolve_run_dir(cfg, output_dir)
    save_config(cfg, run_dir / "config.json")

    rows, checkpoints = [], []
    for step in range(optim_cfg.steps):
        batch = make_batch(cfg, step)
        optimizer.zero_grad()
        losses, _ = batch_losses(model, batch, cfg.loss, workers=workers)
        value = losses.total.item()
        if not np.isfinite(value):
            raise TrainingError(
                f"Loss became {value} at step {step} (batch seed {batch.seed})", batch_seed=batch.seed
            )
        backward(losses.total, params)
        grad_norm = clip_grad_norm(params, optim_cfg.clip_norm)
        lr = learning_rate(step, optim_cfg.steps, optim_cfg.lr, optim_cfg.warmup_fraction)
        optimizer.step(lr)
        rows.append({
            "step": step, "batch_seed": batch.seed, "kind": batch.kind, "frames": batch.num_frames,
            **losses.as_floats(), "lr": lr, "grad_norm": grad_norm,
        })
        done = step + 1
        if done % optim_cfg.checkpoint_every == 0 or done == optim_cfg.steps:
            path = run_dir / generate_output_filename(CHECKPOINT_PREFIX, done)
            save_checkpoint(path, model, asdict(cfg.model))
            checkpoints.append(path)
        if progress_callback and (done % optim_cfg.log_every == 0 or done == optim_cfg.steps):
            progress_callback(f"Step {done}/{optim_cfg.steps} loss {value:.4f}", int(100 * done / optim_cfg.steps))

    history = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    history.to_csv(run_dir / "loss_curve.csv", index=False)
    summary = {
        "steps": optim_cfg.steps,
        "seed": cfg.seed,
        "parameters": model.component_counts(),
        "final_loss": float(history["total"].iloc[-1]),
        "flow_batches": int((history["kind"] == "flow").sum()),
        "track_batches": int((history["kind"] == "track").sum()),
        "checkpoints": [p.name for p in checkpoints],
    }
    (run_dir / "train_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return TrainResult(model, history, run_dir, checkpoints, summary)


# ---------------------------------------------------------------------------
# held-out evaluation
# ---------------------------------------------------------------------------


def translation_epe(model, cfg, n_sequences=20, num_frames=8, seed=10_000, iters=None):
    """Median endpoint error on pure-translation clips, per frame and per refinement step.

    Returns ``{"median_epe", "per_frame", "per_step"}`` where ``per_frame``
    lists the median over sequences of each frame's median EPE and
    ``per_step`` the median EPE after each refinement step of the first
    window.
    """
    data = cfg.data
    rng = np.random.default_rng(seed)
    per_frame, per_step, overall = [], [], []
    for i in range(n_sequences):
        velocity = rng.uniform(-data.max_speed, data.max_speed, size=2)
        scene = translating_scene(seed + i, num_frames, data.height, data.width, velocity)
        sample = render_scene(scene, n_tracks=0)
        out = track(model, sample.video, 0, iters)
        frame_medians = [
            endpoint_error(out.flow[t], sample.flow[t])["median"] for t in range(1, num_frames)
        ]
        per_frame.append(frame_medians)
        overall.append(endpoint_error(out.flow[1:], sample.flow[1:])["median"])
        with no_grad():
            length = min(num_frames, model.cfg.window)
            _, maps = model.forward_window(Tensor(sample.video[:length]), iters=iters)
        gt = sample.flow[1:length]
        per_step.append([
            endpoint_error(np.transpose(m.data[1:, :2], (0, 2, 3, 1)), gt)["median"] for m in maps
        ])
    return {
        "median_epe": float(np.median(overall)),
        "per_frame": np.median(np.asarray(per_frame), axis=0).tolist(),
        "per_step": np.median(np.asarray(per_step), axis=0).tolist(),
    }


def sprite_metrics(model, cfg, n_sequences=10, num_frames=8, seed=20_000, iters=None):
    """Tracking metrics on multi-sprite clips with occlusions."""
    data = cfg.data
    records = []
    for i in range(n_sequences):
        sample = generate(seed + i, num_frames, data.height, data.width, 3, _motion(data), data.n_tracks)
        out = track(model, sample.video, 0, iters)
        sampled = sample_tracks(out, sample.queries)
        records.append(EvalRecord(
            sampled.tracks, sampled.visibility, sample.tracks, sample.track_vis,
            sample.track_valid, data.height, data.width, 0,
        ))
    return compute_metrics(records)
