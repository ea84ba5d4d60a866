"""Finite-difference gradient checks in fp64.

Each check builds a scalar loss from a few tensors, runs :func:`backward`
once and compares sampled gradient entries with central differences. An
entry passes when its relative error is within tolerance, or, for gradients
of magnitude at most ``1e-6``, when its absolute error is at most ``1e-7``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import BackboneConfig, ModelConfig, RefinerConfig
from .correlation import CorrPyramid, correlate, sample_patch
from .encoder import split_context_hidden
from .kernels import (
    avg_pool2d, bilinear_sample_batched, conv2d, gelu, layer_norm, layer_scale, linear,
    multi_head_attention, sigmoid, softmax,
)
from .refiner import Refiner, convex_upsample, window_context
from .supervision import GroundTruth, compute_losses
from .tensor import (
    Tensor, backward, concat, exp, getitem, log, no_grad, pad, sqrt, stack, tanh, tsum,
)
from .tracker import DenseTracker, init_first_window

FD_STEP = 1e-5
OP_RTOL = 1e-4
MODEL_RTOL = 1e-3
SMALL_GRAD = 1e-6
ABS_TOL = 1e-7


@dataclass
class CheckResult:
    name: str
    checked: int
    failures: int
    max_rel_error: float
    max_abs_error: float
    tolerance: float

    @property
    def passed(self):
        return self.failures == 0


@dataclass
class GradCheck:
    """A named scalar loss over ``inputs``; ``loss_fn`` rebuilds the graph on each call."""

    name: str
    loss_fn: Callable[[], Tensor]
    inputs: Sequence[Tuple[str, Tensor]]
    tolerance: float = OP_RTOL
    samples: int = 6


def _leaf(rng, shape, low=None, high=None):
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True, dtype="fp64")


def numerical_gradient(loss_fn, tensor, index, h=FD_STEP):
    """Central difference of ``loss_fn()`` in one entry of ``tensor``."""
    original = tensor.data[index]
    with no_grad():
        tensor.data[index] = original + h
        plus = loss_fn().item()
        tensor.data[index] = original - h
        minus = loss_fn().item()
    tensor.data[index] = original
    return (plus - minus) / (2.0 * h)


def run_check(check, rng):
    tensors = [t for _, t in check.inputs]
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    backward(check.loss_fn(), tensors)
    analytic = [t.grad.copy() for t in tensors]
    checked = failures = 0
    max_rel = max_abs = 0.0
    for t, grad in zip(tensors, analytic):
        picks = rng.choice(t.size, size=min(check.samples, t.size), replace=False)
        for flat in picks:
            index = np.unravel_index(int(flat), t.shape)
            num = numerical_gradient(check.loss_fn, t, index)
            ana = float(grad[index])
            err = abs(ana - num)
            max_abs = max(max_abs, err)
            if abs(ana) > SMALL_GRAD:
                rel = err / max(abs(ana), abs(num))
                max_rel = max(max_rel, rel)
                ok = rel <= check.tolerance
            else:
                ok = err <= ABS_TOL
            checked += 1
            failures += not ok
    return CheckResult(check.name, checked, failures, max_rel, max_abs, check.tolerance)


# ---------------------------------------------------------------------------
# per-op checks
# ---------------------------------------------------------------------------


def _projected(shape, rng):
    """``sum(t * R)`` for a fixed random ``R`` so every output entry matters."""
    weights = rng.standard_normal(shape)
    return lambda t: tsum(t * weights)


def op_checks(rng):
    checks = []

    x, w, b = _leaf(rng, (2, 4, 6, 6)), _leaf(rng, (6, 2, 3, 3)), _leaf(rng, (6,))
    proj = _projected((2, 6, 3, 3), rng)
    checks.append(GradCheck(
        "conv2d grouped stride 2", lambda: proj(conv2d(x, w, b, stride=2, padding=1, groups=2)),
        [("input", x), ("weight", w), ("bias", b)],
    ))

    xd, wd = _leaf(rng, (1, 3, 8, 8)), _leaf(rng, (3, 1, 7, 7))
    proj_d = _projected((1, 3, 8, 8), rng)
    checks.append(GradCheck(
        "conv2d depthwise 7x7", lambda: proj_d(conv2d(xd, wd, None, padding=3, groups=3)),
        [("input", xd), ("weight", wd)],
    ))

    xp = _leaf(rng, (1, 2, 7, 5))
    proj_p = _projected((1, 2, 4, 3), rng)
    checks.append(GradCheck("avg_pool2d partial windows", lambda: proj_p(avg_pool2d(xp, 2)), [("input", xp)]))

    maps, coords = _leaf(rng, (2, 3, 5, 6)), _leaf(rng, (2, 7, 2), -1.5, 6.5)
    proj_b = _projected((2, 7, 3), rng)
    checks.append(GradCheck(
        "bilinear_sample", lambda: proj_b(bilinear_sample_batched(maps, coords)),
        [("map", maps), ("coords", coords)],
    ))

    xl, gl, bl = _leaf(rng, (4, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
    proj_l = _projected((4, 6), rng)
    checks.append(GradCheck(
        "layer_norm last axis", lambda: proj_l(layer_norm(xl, gl, bl)),
        [("input", xl), ("weight", gl), ("bias", bl)],
    ))
    xc, gc, bc = _leaf(rng, (2, 5, 3, 3)), _leaf(rng, (5,)), _leaf(rng, (5,))
    proj_c = _projected((2, 5, 3, 3), rng)
    checks.append(GradCheck(
        "layer_norm channel axis", lambda: proj_c(layer_norm(xc, gc, bc, axis=1)),
        [("input", xc), ("weight", gc), ("bias", bc)],
    ))

    xa = _leaf(rng, (3, 5))
    proj_a = _projected((3, 5), rng)
    checks.append(GradCheck("gelu", lambda: proj_a(gelu(xa)), [("input", xa)]))
    checks.append(GradCheck("sigmoid", lambda: proj_a(sigmoid(xa)), [("input", xa)]))
    checks.append(GradCheck("softmax", lambda: proj_a(softmax(xa, axis=1)), [("input", xa)]))

    xf, wf, bf = _leaf(rng, (4, 5)), _leaf(rng, (3, 5)), _leaf(rng, (3,))
    proj_f = _projected((4, 3), rng)
    checks.append(GradCheck(
        "linear", lambda: proj_f(linear(xf, wf, bf)), [("input", xf), ("weight", wf), ("bias", bf)]
    ))

    xs, gs = _leaf(rng, (2, 4, 3, 3)), _leaf(rng, (4,))
    proj_s = _projected((2, 4, 3, 3), rng)
    checks.append(GradCheck(
        "layer_scale", lambda: proj_s(layer_scale(xs, gs, axis=1)), [("input", xs), ("gamma", gs)]
    ))

    xm = _leaf(rng, (3, 8))
    mats = [Tensor(0.5 * rng.standard_normal((8, 8)), requires_grad=True, dtype="fp64") for _ in range(4)]
    biases = [_leaf(rng, (8,)) for _ in range(4)]
    proj_m = _projected((3, 8), rng)

    def attention_loss():
        wq, wk, wv, wo = mats
        bq, bk, bv, bo = biases
        return proj_m(multi_head_attention(xm, wq, bq, wk, bk, wv, bv, wo, bo, heads=2))

    checks.append(GradCheck(
        "multi_head_attention", attention_loss,
        [("input", xm)] + [(f"w{n}", m) for n, m in zip("qkvo", mats)] + [(f"b{n}", v) for n, v in zip("qkvo", biases)],
    ))

    pa, pb, pc = _leaf(rng, (3, 4)), _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    proj_e = _projected((3, 4), rng)
    checks.append(GradCheck(
        "elementwise",
        lambda: proj_e(tanh(pa) * exp(pb * 0.5) / (pc * pc + 1.0) + sqrt(pc * pc + 1.0) + log(pa * pa + 2.0)),
        [("a", pa), ("b", pb), ("c", pc)],
    ))

    sa, sb = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 3, 4))
    index = (slice(None), np.array([0, 2, 2]), np.array([1, 3, 0]))
    shape_weights = rng.standard_normal((2, 3, 2, 6))
    proj_i = _projected((2, 3), rng)

    def shape_loss():
        edged = pad(sa, ((0, 0), (0, 0), (1, 1)), mode="edge")
        joined = concat([sb, sa[:, :, :2]], axis=2)
        stacked = stack([edged, joined], axis=2)
        return tsum(stacked * shape_weights) + proj_i(getitem(sa * sb, index))

    checks.append(GradCheck("shape ops", shape_loss, [("a", sa), ("b", sb)]))

    qf, tf = _leaf(rng, (6, 4, 4)), _leaf(rng, (2, 6, 4, 4))
    proj_q = _projected((2, 16, 4, 4), rng)
    checks.append(GradCheck(
        "correlate", lambda: proj_q(correlate(qf, tf)), [("query", qf), ("target", tf)]
    ))

    heats = [_leaf(rng, (6, 6)), _leaf(rng, (3, 3))]
    position = _leaf(rng, (2,), 0.3, 4.7)
    proj_h = _projected((2 * 9,), rng)
    checks.append(GradCheck(
        "sample_patch", lambda: proj_h(sample_patch(heats, position, 1)),
        [("level0", heats[0]), ("level1", heats[1]), ("position", position)],
    ))

    pq, pf = _leaf(rng, (4, 4, 4)), _leaf(rng, (2, 4, 4, 4))
    ppos = _leaf(rng, (2, 2, 4, 4), -0.5, 4.0)
    proj_c2 = _projected((2, 2 * 9, 4, 4), rng)
    checks.append(GradCheck(
        "correlation pyramid sampling",
        lambda: proj_c2(CorrPyramid(pq, pf, 2, 1, chunk_rows=3).sample(ppos)),
        [("query", pq), ("frames", pf), ("positions", ppos)],
    ))

    field = _leaf(rng, (2, 3, 3, 4))
    logits = _leaf(rng, (2, 9, 64, 3, 4))
    proj_u = _projected((2, 3, 24, 32), rng)
    checks.append(GradCheck(
        "convex_upsample",
        lambda: proj_u(convex_upsample(field, softmax(logits, axis=1).reshape(2, 576, 3, 4))),
        [("field", field), ("logits", logits)],
    ))

    checks.append(_loss_check(rng))
    return checks


def _loss_check(rng):
    """Track, visibility and confidence losses through sparse sampling on an 8x8 toy."""
    s, h, w, n = 3, 8, 8, 10
    dense = [_leaf(rng, (s, 4, h, w)) for _ in range(2)]
    queries = np.stack([rng.uniform(0.2, w - 1.2, n), rng.uniform(0.2, h - 1.2, n)], axis=-1)
    tracks = queries[None] + rng.normal(0.0, 6.0, (s, n, 2))
    gt = GroundTruth(
        queries=queries,
        tracks=tracks,
        valid=rng.random((s, n)) > 0.2,
        visibility=(rng.random((s, n)) > 0.4).astype(np.float64),
    )
    return GradCheck(
        "losses through sparse sampling",
        lambda: compute_losses(dense, gt).total,
        [(f"maps{k}", m) for k, m in enumerate(dense)],
    )


# ---------------------------------------------------------------------------
# end-to-end checks
# ---------------------------------------------------------------------------


def _jitter(module, rng, scale=0.05):
    """Perturb every parameter so no branch sits at its zero/identity init."""
    for param in module.parameters():
        param.tensor.data = param.tensor.data + rng.normal(0.0, scale, param.tensor.shape)


def _param_inputs(module):
    return [(p.name, p.tensor) for p in module.parameters()]


def refine_check(rng, samples=2):
    """Full refinement pass (D=32, S=3, 8x8 cells) against every parameter."""
    cfg = RefinerConfig(
        n_blocks=3, kernel=3, heads=2, expansion=2, corr_radius=2, corr_levels=3, iters=2,
        width=16, hidden_dim=16, corr_dims=(16, 12), motion_dims=(8, 8), merge_dim=8,
    )
    refiner = Refiner(rng, cfg).to("fp64")
    _jitter(refiner, rng)
    query_feat = _leaf(rng, (32, 8, 8))
    frame_feats = _leaf(rng, (3, 32, 8, 8))
    weights = rng.standard_normal((3, 4, 64, 64))

    def loss_fn():
        context, hidden = split_context_hidden(query_feat)
        state = init_first_window(8, 8, 3, hidden)
        pyramid = CorrPyramid(query_feat, frame_feats, cfg.corr_levels, cfg.corr_radius)
        states = refiner.refine(state, pyramid, window_context(context, 3))
        return tsum(refiner.upsample(states[-1]) * weights) + tsum(states[0].flow) * 0.1

    inputs = [("query_feat", query_feat), ("frame_feats", frame_feats)] + _param_inputs(refiner)
    return GradCheck("refine end-to-end", loss_fn, inputs, MODEL_RTOL, samples)


def tiny_model_config():
    return ModelConfig(
        backbone=BackboneConfig(feature_dim=16, block_depths=(1, 1, 1), stage_dims=(8, 8, 16)),
        refiner=RefinerConfig(
            n_blocks=1, kernel=3, heads=2, expansion=2, corr_radius=1, corr_levels=2, iters=2,
            width=8, hidden_dim=8, corr_dims=(8, 8), motion_dims=(4, 4), merge_dim=4,
        ),
        window=2,
    )


def model_check(rng, samples=1):
    """Whole model on a 2-frame 32x32 clip, losses included."""
    model = DenseTracker(tiny_model_config(), rng).to("fp64")
    _jitter(model, rng)
    frames = Tensor(rng.uniform(0.0, 1.0, (2, 3, 32, 32)), dtype="fp64")
    n = 12
    queries = np.stack([rng.uniform(0.3, 30.7, n), rng.uniform(0.3, 30.7, n)], axis=-1)
    gt = GroundTruth(
        queries=queries,
        tracks=queries[None] + rng.normal(0.0, 3.0, (2, n, 2)),
        valid=np.ones((2, n), dtype=bool),
        visibility=(rng.random((2, n)) > 0.3).astype(np.float64),
    )

    def loss_fn():
        _, maps = model.forward_window(frames)
        return compute_losses(maps, gt).total

    return GradCheck("model end-to-end", loss_fn, _param_inputs(model), MODEL_RTOL, samples)


def all_checks(rng, include_model=True):
    checks = op_checks(rng)
    checks.append(refine_check(rng))
    if include_model:
        checks.append(model_check(rng))
    return checks


def run_gradcheck(seed=0, include_model=True, progress_callback=None) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = all_checks(rng, include_model)
    results = []
    for i, check in enumerate(checks):
        if progress_callback:
            progress_callback(f"Checking {check.name}", int(100 * i / len(checks)))
        results.append(run_check(check, rng))
    if progress_callback:
        progress_callback("Gradient checks complete", 100)
    return results


def all_passed(results):
    return all(r.passed for r in results)


def results_frame(results):
    return pd.DataFrame(
        [
            {
                "check": r.name, "entries": r.checked, "failures": r.failures,
                "max_rel_error": r.max_rel_error, "max_abs_error": r.max_abs_error,
                "tolerance": r.tolerance, "status": "ok" if r.passed else "FAIL",
            }
            for r in results
        ],
        columns=["check", "entries", "failures", "max_rel_error", "max_abs_error", "tolerance", "status"],
    )
