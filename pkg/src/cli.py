"""Command-line interface.

Usage:
    dense-tracker track --frames <dir> --out <dir> [--query-frame N] [--resolution HxW]
                        [--window S] [--iters K] [--checkpoint <path>] [--queries <csv>]
    dense-tracker train [--config <json> | --preset desk] [--steps N] [--out <dir>]
    dense-tracker eval --pred <trackfile> --gt <trackfile> [--query-first]
    dense-tracker eval --flow-pred <flo|dir> --flow-gt <flo|dir>
    dense-tracker gradcheck [--seed N] [--skip-model]
    dense-tracker viz --flow <flo|dir> --out <png|dir> [--max-flow M]
    dense-tracker gen-data --seed N --out <dir> [--count N] [--frames T]

Exit codes: 0 success, 1 engine error (message on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import report
from .checkpoint import load_checkpoint
from .config import ModelConfig, PRESETS, load_config, preset
from .errors import ArgumentError, FormatError, TrackerError
from .flow_io import read_flow, save_flow_image, write_flow
from .gradcheck import all_passed, results_frame, run_gradcheck
from .metrics import EvalRecord, compute_metrics, endpoint_error
from .synthdata import AugmentParams, MotionRanges, augment, generate, write_sample
from .tracker import DenseTracker, TrackerOutput, sample_tracks, track
from .trackfile import TrackFile, read_trackfile, write_trackfile
from .utils import get_config_path, load_frames, parse_resolution, resize_frames, resize_output, save_gray


class _Progress:
    """Adapts ``progress_callback(message, percent)`` to a tqdm bar."""

    def __init__(self, desc):
        self.bar = tqdm(total=100, desc=desc, unit="%", leave=False)

    def __call__(self, message, percent):
        self.bar.set_postfix_str(message)
        self.bar.update(max(0, percent - self.bar.n))

    def close(self):
        self.bar.close()


def _resolution(text):
    try:
        return parse_resolution(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _run_config(args):
    """Config file, else preset, else the repository config.json, else the desk preset."""
    if getattr(args, "config", None):
        return load_config(args.config)
    if getattr(args, "preset", None):
        return preset(args.preset).validate()
    if Path(get_config_path()).exists():
        return load_config()
    return preset("desk").validate()


def _build_model(args):
    if args.checkpoint:
        state, meta = load_checkpoint(args.checkpoint)
        model_cfg = ModelConfig.from_dict(meta) if meta else _run_config(args).model
    else:
        print("WARNING: no --checkpoint given; tracking with untrained weights", file=sys.stderr)
        model_cfg = _run_config(args).model
        state = None
    if args.window:
        model_cfg = replace(model_cfg, window=args.window).validate()
    model = DenseTracker(model_cfg, np.random.default_rng(0))
    if state is not None:
        model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------


def _read_queries(path):
    try:
        table = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise FormatError(f"Failed to read queries {path}: {e}")
    if not {"x", "y"} <= set(table.columns):
        raise FormatError(f"{path}: query file needs x and y columns")
    return table[["x", "y"]].to_numpy(dtype=np.float64)


def cmd_track(args):
    frames = load_frames(args.frames)
    total, _, height, width = frames.shape
    model = _build_model(args)
    work = resize_frames(frames, args.resolution) if args.resolution else frames
    progress = _Progress("track")
    try:
        out = track(model, work, args.query_frame, args.iters, args.workers, progress)
    finally:
        progress.close()
    if args.resolution:
        out = TrackerOutput(resize_output(out.result, (height, width)), out.query_index, out.frame_indices)

    out_dir = Path(args.out)
    for t in range(total):
        write_flow(out_dir / "flow" / f"{t:05d}.flo", out.flow[t])
        save_gray(out_dir / "vis" / f"{t:05d}.png", out.visibility[t])
        save_gray(out_dir / "conf" / f"{t:05d}.png", out.confidence[t])
    print(f"Tracked {total} frame(s) from query frame {args.query_frame}")
    print(f"Wrote {out_dir / 'flow'}")
    print(f"Wrote {out_dir / 'vis'}")
    print(f"Wrote {out_dir / 'conf'}")

    if args.queries:
        queries = _read_queries(args.queries)
        sampled = sample_tracks(out, queries)
        tf = TrackFile(
            tracks=sampled.tracks,
            visibility=(sampled.visibility >= 0.5).astype(np.float32),
            valid=np.ones(sampled.visibility.shape, dtype=bool),
            queries=queries.astype(np.float32),
            height=height,
            width=width,
            query_frame=args.query_frame,
        )
        path = write_trackfile(out_dir / "tracks.csv", tf)
        print(f"Wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args):
    from .trainer import sprite_metrics, train, translation_epe

    cfg = _run_config(args)
    if args.steps is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, steps=args.steps))
    if args.lr is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, lr=args.lr))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.reference_mode:
        cfg = replace(cfg, reference_mode=True)
    cfg.validate()

    progress = _Progress("train")
    try:
        result = train(cfg, output_dir=args.out, progress_callback=progress)
    finally:
        progress.close()
    counts = result.summary["parameters"]
    print(f"Trained {cfg.optim.steps} step(s); final loss {result.summary['final_loss']:.4f}")
    print(f"Parameters: {counts['total']:,} (backbone {counts['backbone']:,}, refiner {counts['refiner']:,})")
    for path in result.checkpoints:
        print(f"Wrote {path}")
    print(f"Wrote {result.run_dir / 'loss_curve.csv'}")
    print(f"Wrote {result.run_dir / 'train_summary.json'}")

    if args.evaluate:
        epe = translation_epe(result.model, cfg)
        metrics = sprite_metrics(result.model, cfg)
        print(f"Held-out translation median EPE: {epe['median_epe']:.3f} px")
        print("Median EPE per refinement step: " + ", ".join(f"{v:.3f}" for v in epe["per_step"]))
        print(report.render_console(metrics))
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _flow_files(path):
    path = Path(path)
    if path.is_dir():
        return sorted(path.glob("*.flo"))
    return [path]


def _eval_flow(args):
    preds, gts = _flow_files(args.flow_pred), _flow_files(args.flow_gt)
    if len(preds) != len(gts):
        raise ArgumentError(f"{len(preds)} predicted flow file(s) vs {len(gts)} ground-truth file(s)")
    if not preds:
        raise ArgumentError(f"No .flo files under {args.flow_pred}")
    pred = np.stack([read_flow(p) for p in preds])
    gt = np.stack([read_flow(g) for g in gts])
    epe = endpoint_error(pred, gt)
    metrics = {"epe_mean": epe["mean"], "epe_median": epe["median"], "epe_count": epe["count"]}
    print(report.render_flow_console(metrics))
    json_path, csv_path = report.report_paths(args.flow_pred)
    return metrics, {"pred": args.flow_pred, "gt": args.flow_gt}, json_path, csv_path, "flow"


def _eval_tracks(args):
    pred, gt = read_trackfile(args.pred), read_trackfile(args.gt)
    record = EvalRecord(
        pred.tracks, pred.visibility, gt.tracks, gt.visibility, gt.valid,
        gt.height, gt.width, gt.query_frame,
    )
    protocol = "first" if args.query_first else "strided"
    metrics = compute_metrics([record], protocol)
    print(report.render_console(metrics, protocol))
    json_path, csv_path = report.report_paths(args.pred)
    return metrics, {"pred": args.pred, "gt": args.gt}, json_path, csv_path, protocol


def cmd_eval(args):
    if args.flow_pred or args.flow_gt:
        if not (args.flow_pred and args.flow_gt):
            raise ArgumentError("--flow-pred and --flow-gt must be given together")
        metrics, inputs, json_path, csv_path, protocol = _eval_flow(args)
    else:
        if not (args.pred and args.gt):
            raise ArgumentError("eval needs --pred and --gt (or --flow-pred and --flow-gt)")
        metrics, inputs, json_path, csv_path, protocol = _eval_tracks(args)
    report.write_json(metrics, inputs, json_path, protocol)
    report.write_csv(metrics, csv_path)
    print(f"\nWrote {json_path}")
    print(f"Wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck, viz, gen-data
# ---------------------------------------------------------------------------


def cmd_gradcheck(args):
    progress = _Progress("gradcheck")
    try:
        results = run_gradcheck(args.seed, include_model=not args.skip_model, progress_callback=progress)
    finally:
        progress.close()
    print(results_frame(results).to_string(index=False))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"\n{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
    else:
        print(f"\nAll {len(results)} gradient checks passed")
    return 0 if all_passed(results) else 1


def cmd_viz(args):
    sources = _flow_files(args.flow)
    if not sources:
        raise ArgumentError(f"No .flo files under {args.flow}")
    out = Path(args.out)
    single = len(sources) == 1 and out.suffix.lower() == ".png"
    for src in sources:
        target = out if single else out / (src.stem + ".png")
        save_flow_image(target, read_flow(src), args.max_flow)
        print(f"Wrote {target}")
    return 0


def cmd_gen_data(args):
    motion = MotionRanges(max_speed=args.max_speed)
    params = AugmentParams(shift=4.0, scale_range=0.1, color_jitter=0.1, max_occluders=2)
    out = Path(args.out)
    for i in range(args.count):
        seed = args.seed + i
        sample = generate(seed, args.frames, args.height, args.width, args.sprites, motion, args.tracks)
        if args.augment:
            sample = augment(sample, seed, params)
        directory = write_sample(sample, out / f"sample_{i:05d}" if args.count > 1 else out)
        print(f"Wrote {directory}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_model_source(p):
    p.add_argument("--config", help="run config JSON (default: config.json)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="configuration preset")


def build_parser():
    parser = argparse.ArgumentParser(prog="dense-tracker", description="Dense point tracking engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="dense tracks for a frame directory")
    p.add_argument("--frames", required=True, help="directory of PNG frames")
    p.add_argument("--query-frame", type=int, default=0)
    p.add_argument("--resolution", type=_resolution, help="inference size HxW")
    p.add_argument("--window", type=int, help="window length S (even)")
    p.add_argument("--iters", type=int, help="refinement iterations K")
    p.add_argument("--checkpoint", help="ATKPT1 checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--queries", help="CSV with x,y columns; writes tracks.csv")
    p.add_argument("--workers", type=int, default=1)
    _add_model_source(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train", help="train on synthetic data")
    _add_model_source(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--reference-mode", action="store_true", help="serial deterministic execution")
    p.add_argument("--out", help="run directory (default: <output_dir>/train_<timestamp>)")
    p.add_argument("--evaluate", action="store_true", help="report held-out synthetic metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="tracking metrics or flow endpoint error")
    p.add_argument("--pred", help="predicted track file")
    p.add_argument("--gt", help="ground-truth track file")
    p.add_argument(
        "--query-first", action="store_true",
        help="only score frames after the query frame (by default every frame but the query frame is scored)",
    )
    p.add_argument("--flow-pred", help="predicted .flo file or directory")
    p.add_argument("--flow-gt", help="ground-truth .flo file or directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-model", action="store_true", help="skip the whole-model check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("viz", help="flow file to color PNG")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-flow", type=float)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("gen-data", help="write synthetic samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--sprites", type=int, default=2)
    p.add_argument("--tracks", type=int, default=256)
    p.add_argument("--max-speed", type=float, default=4.0)
    p.add_argument("--augment", action="store_true")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrackerError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
