"""Console, JSON and CSV renderings of metric results."""
from __future__ import annotations

import json
from datetime import datetime
from pathlib import Path

import pandas as pd

from .metrics import SCORED_FRAMES, THRESHOLDS


def _fmt(value):
    return "n/a" if value is None else f"{value:.2f}"


def metrics_frame(metrics):
    """One row per threshold with delta and Jaccard columns."""
    rows = [
        {"k": k, "delta": metrics.get(f"delta_{k}"), "jaccard": metrics.get(f"jaccard_{k}")}
        for k in THRESHOLDS
    ]
    return pd.DataFrame(rows, columns=["k", "delta", "jaccard"])


def render_console(metrics, protocol="strided"):
    lines = [f"Tracking metrics ({protocol} protocol, measured at 256x256)"]
    if protocol in SCORED_FRAMES:
        lines.append(f"Scored: {SCORED_FRAMES[protocol]}")
    lines.append("")
    table = metrics_frame(metrics)
    table["delta"] = table["delta"].map(_fmt)
    table["jaccard"] = table["jaccard"].map(_fmt)
    lines.append(table.to_string(index=False))
    lines.append("")
    lines.append(f"  delta_avg          {_fmt(metrics.get('delta_avg'))}")
    lines.append(f"  occlusion_accuracy {_fmt(metrics.get('occlusion_accuracy'))}")
    lines.append(f"  average_jaccard    {_fmt(metrics.get('average_jaccard'))}")
    if "epe_mean" in metrics:
        lines.append(f"  epe_mean           {_fmt(metrics.get('epe_mean'))}")
        lines.append(f"  epe_median         {_fmt(metrics.get('epe_median'))}")
    return "\n".join(lines)


def write_json(metrics, inputs, out_path, protocol="strided"):
    payload = {
        "inputs": {k: str(v) for k, v in inputs.items()},
        "protocol": protocol,
        "scored_frames": SCORED_FRAMES.get(protocol, "all frames"),
        "generated_at": datetime.now().isoformat(timespec="seconds"),
        "metrics": metrics,
    }
    Path(out_path).write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")


def write_csv(metrics, out_path):
    frame = pd.DataFrame(
        [{"metric": name, "value": "" if value is None else value} for name, value in metrics.items()],
        columns=["metric", "value"],
    )
    frame.to_csv(out_path, index=False)


def report_paths(pred_path):
    pred_path = Path(pred_path)
    return (
        pred_path.with_suffix(pred_path.suffix + ".metrics.json"),
        pred_path.with_suffix(pred_path.suffix + ".metrics.csv"),
    )


def render_flow_console(metrics):
    lines = ["Dense flow endpoint error", ""]
    lines.append(f"  pixels     {metrics.get('epe_count', 0)}")
    lines.append(f"  epe_mean   {_fmt(metrics.get('epe_mean'))}")
    lines.append(f"  epe_median {_fmt(metrics.get('epe_median'))}")
    return "\n".join(lines)
