"""Refinement stage: input encoding, space-time blocks, revisions and upsampling."""
import math

import numpy as np
import pytest
from scipy.special import erf

from src.config import RefinerConfig
from src.correlation import CorrPyramid
from src.errors import ConfigError
from src.layers import count_parameters
from src.refiner import (
    Refiner, SpaceTimeBlock, TrackState, apply_revisions, convex_upsample, positions_of,
    sinusoidal_embedding, window_context,
)
from src.tensor import Tensor, no_grad

from test_kernels import attention_oracle


def small_refiner_config(**overrides):
    base = dict(
        n_blocks=2, kernel=3, heads=2, expansion=2, corr_radius=1, corr_levels=2, iters=2,
        width=8, hidden_dim=4, corr_dims=(8, 6), motion_dims=(4, 4), merge_dim=4,
    )
    base.update(overrides)
    return RefinerConfig(**base)


def make_state(rng, s, h, w, hidden=4):
    return TrackState(
        Tensor(rng.normal(size=(s, 2, h, w)), dtype="fp64"),
        Tensor(rng.normal(size=(s, 1, h, w)), dtype="fp64"),
        Tensor(rng.normal(size=(s, 1, h, w)), dtype="fp64"),
        Tensor(rng.normal(size=(s, hidden, h, w)), dtype="fp64"),
    )


def ln(x, weight, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6) * weight + bias


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


class TestChannelAccounting:
    def test_default_channels(self, rng):
        refiner = Refiner(rng, RefinerConfig())
        assert refiner.inputs.input_channels == 665
        assert refiner.head.weight.shape[0] == 132

    def test_shared_weights_independent_of_iters(self):
        a = Refiner(np.random.default_rng(0), small_refiner_config(iters=1))
        b = Refiner(np.random.default_rng(0), small_refiner_config(iters=4))
        assert count_parameters(a) == count_parameters(b)

    def test_shared_block_fills_every_slot(self):
        shared = Refiner(np.random.default_rng(0), small_refiner_config(n_blocks=3))
        assert all(block is shared.block for block in shared.blocks)
        separate = Refiner(np.random.default_rng(0), small_refiner_config(n_blocks=3, share_blocks=False))
        assert len({id(block) for block in separate.blocks}) == 3

    def test_unshared_blocks_cost_more(self):
        shared = Refiner(np.random.default_rng(0), small_refiner_config())
        separate = Refiner(np.random.default_rng(0), small_refiner_config(share_blocks=False))
        block = count_parameters(shared.block)
        assert count_parameters(separate) == count_parameters(shared) + block


class TestInputEncoder:
    def test_shape(self, rng):
        refiner = Refiner(rng, small_refiner_config())
        corr = Tensor(rng.normal(size=(2, 18, 3, 3)))
        out = refiner.inputs(corr, Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros((2, 1, 3, 3))),
                             Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros((2, 8, 3, 3))))
        assert out.shape == (2, 8, 3, 3)

    def test_zero_inputs_give_bias_path(self, rng):
        refiner = Refiner(rng, small_refiner_config())
        zeros = lambda c: Tensor(np.zeros((2, c, 3, 3)))
        out = refiner.inputs(zeros(18), zeros(2), zeros(1), zeros(1), zeros(8)).data
        np.testing.assert_array_equal(out, np.broadcast_to(out[:, :, :1, :1], out.shape))

    def test_channel_mismatch(self, rng):
        refiner = Refiner(rng, small_refiner_config())
        zeros = lambda c: Tensor(np.zeros((1, c, 2, 2)))
        with pytest.raises(ConfigError):
            refiner.inputs(zeros(17), zeros(2), zeros(1), zeros(1), zeros(8))


class TestSpaceTimeBlock:
    def _block(self, rng, dim=8):
        block = SpaceTimeBlock(rng, dim, kernel=3, heads=2, expansion=2).to("fp64")
        block.attn_scale.gamma.data = np.ones(dim)
        block.mlp_scale.gamma.data = np.ones(dim)
        return block

    def test_single_frame(self, rng):
        block = self._block(rng)
        with no_grad():
            out = block(Tensor(rng.normal(size=(1, 8, 3, 3)), dtype="fp64"))
        assert out.shape == (1, 8, 3, 3)
        assert np.isfinite(out.data).all()

    def test_temporal_matches_dense_oracle(self, rng):
        block = self._block(rng)
        x = rng.normal(size=(2, 8, 2, 3))
        with no_grad():
            out = block.temporal(Tensor(x, dtype="fp64")).data
        p = lambda lin: (lin.weight.data, lin.bias.data)
        for i in range(2):
            for j in range(3):
                tokens = x[:, :, i, j]
                normed = ln(tokens, block.attn_norm.weight.data, block.attn_norm.bias.data)
                attn = attention_oracle(normed, *p(block.attn.q), *p(block.attn.k), *p(block.attn.v),
                                        *p(block.attn.out), heads=2)
                t1 = tokens + attn
                hidden = np_gelu(ln(t1, block.mlp_norm.weight.data, block.mlp_norm.bias.data)
                                 @ block.mlp_fc1.weight.data.T + block.mlp_fc1.bias.data)
                t2 = t1 + hidden @ block.mlp_fc2.weight.data.T + block.mlp_fc2.bias.data
                expected = t2 @ block.temporal_proj.weight.data.T + block.temporal_proj.bias.data
                np.testing.assert_allclose(out[:, :, i, j], expected, atol=1e-9)

    def test_temporal_commutes_with_spatial_permutation(self, rng):
        block = self._block(rng)
        x = rng.normal(size=(3, 8, 2, 3))
        perm = rng.permutation(6)
        with no_grad():
            direct = block.temporal(Tensor(x, dtype="fp64")).data.reshape(3, 8, 6)[:, :, perm]
            shuffled = x.reshape(3, 8, 6)[:, :, perm].reshape(3, 8, 2, 3)
            permuted = block.temporal(Tensor(shuffled, dtype="fp64")).data.reshape(3, 8, 6)
        np.testing.assert_allclose(direct, permuted, atol=1e-12)

    def test_temporal_is_pixel_local(self, rng):
        block = self._block(rng)
        x = rng.normal(size=(3, 8, 3, 3))
        y = x.copy()
        y[:, :, 1, 2] += 1.0
        with no_grad():
            a = block.temporal(Tensor(x, dtype="fp64")).data
            b = block.temporal(Tensor(y, dtype="fp64")).data
        changed = np.abs(a - b).max(axis=(0, 1)) > 1e-12
        expected = np.zeros((3, 3), dtype=bool)
        expected[1, 2] = True
        np.testing.assert_array_equal(changed, expected)


class TestRevisions:
    def test_zero_init_head(self, rng):
        refiner = Refiner(rng, small_refiner_config())
        d_flow, d_vis, d_conf, hidden = refiner.decode_revisions(Tensor(rng.normal(size=(2, 8, 3, 4))))
        assert d_flow.shape == (2, 2, 3, 4) and hidden.shape == (2, 4, 3, 4)
        assert not (d_flow.data.any() or d_vis.data.any() or d_conf.data.any())

    def test_zero_revision_keeps_state(self, rng):
        state = make_state(rng, 2, 3, 3)
        zero = lambda t: Tensor(np.zeros(t.shape))
        out = apply_revisions(state, (zero(state.flow), zero(state.vis_logit), zero(state.conf_logit), state.hidden))
        np.testing.assert_array_equal(out.flow.data, state.flow.data)
        np.testing.assert_array_equal(out.vis_logit.data, state.vis_logit.data)

    def test_additive(self, rng):
        state = make_state(rng, 1, 2, 2)
        d1 = [Tensor(rng.normal(size=t.shape)) for t in (state.flow, state.vis_logit, state.conf_logit)]
        d2 = [Tensor(rng.normal(size=t.shape)) for t in (state.flow, state.vis_logit, state.conf_logit)]
        twice = apply_revisions(apply_revisions(state, (*d1, state.hidden)), (*d2, state.hidden))
        once = apply_revisions(state, tuple(a + b for a, b in zip(d1, d2)) + (state.hidden,))
        np.testing.assert_allclose(twice.flow.data, once.flow.data, atol=1e-12)
        np.testing.assert_allclose(twice.conf_logit.data, once.conf_logit.data, atol=1e-12)

    def test_flow_revision_moves_position(self, rng):
        state = make_state(rng, 1, 2, 2)
        delta = np.zeros((1, 2, 2, 2))
        delta[:, 0], delta[:, 1] = 1.5, -2.0
        zero = Tensor(np.zeros((1, 1, 2, 2)))
        moved = apply_revisions(state, (Tensor(delta), zero, zero, state.hidden))
        shift = (positions_of(moved).data - positions_of(state).data) * 8
        np.testing.assert_allclose(shift[:, 0], 1.5, atol=1e-12)
        np.testing.assert_allclose(shift[:, 1], -2.0, atol=1e-12)


def upsample_oracle(field, weights):
    s, c, h, w = field.shape
    padded = np.pad(field, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros((s, c, 8 * h, 8 * w))
    for t in range(s):
        for i in range(h):
            for j in range(w):
                for fy in range(8):
                    for fx in range(8):
                        acc = np.zeros(c)
                        for k in range(9):
                            ky, kx = divmod(k, 3)
                            acc += weights[t, k * 64 + fy * 8 + fx, i, j] * padded[t, :, i + ky, j + kx]
                        out[t, :, 8 * i + fy, 8 * j + fx] = acc
    return out


def random_convex_weights(rng, s, h, w):
    raw = rng.uniform(size=(s, 9, 64, h, w))
    return (raw / raw.sum(axis=1, keepdims=True)).reshape(s, 576, h, w)


class TestUpsampling:
    def test_weights_are_softmax(self, rng):
        refiner = Refiner(rng, small_refiner_config())
        weights = refiner.decode_upsample_weights(Tensor(rng.normal(size=(2, 4, 3, 3)))).data
        assert weights.shape == (2, 576, 3, 3)
        np.testing.assert_allclose(weights.reshape(2, 9, 64, 3, 3).sum(axis=1), 1.0, atol=1e-6)

    def test_uniform_logits(self, rng):
        refiner = Refiner(rng, small_refiner_config())
        refiner.upsample_conv2.weight.data[:] = 0.0
        weights = refiner.decode_upsample_weights(Tensor(rng.normal(size=(1, 4, 2, 2)))).data
        np.testing.assert_allclose(weights, 1.0 / 9.0, rtol=1e-6)

    def test_constant_field(self, rng):
        field = Tensor(np.full((2, 3, 2, 3), 4.25))
        out = convex_upsample(field, Tensor(random_convex_weights(rng, 2, 2, 3))).data
        assert out.shape == (2, 3, 16, 24)
        np.testing.assert_allclose(out, 4.25, rtol=1e-12)

    def test_center_one_hot_replicates(self, rng):
        field = rng.normal(size=(1, 2, 3, 2))
        weights = np.zeros((1, 9, 64, 3, 2))
        weights[:, 4] = 1.0
        out = convex_upsample(Tensor(field, dtype="fp64"), Tensor(weights.reshape(1, 576, 3, 2), dtype="fp64")).data
        np.testing.assert_array_equal(out, np.repeat(np.repeat(field, 8, axis=2), 8, axis=3))

    def test_matches_loop_oracle(self, rng):
        for _ in range(3):
            field = rng.normal(size=(2, 3, 3, 2))
            weights = random_convex_weights(rng, 2, 3, 2)
            out = convex_upsample(Tensor(field, dtype="fp64"), Tensor(weights, dtype="fp64")).data
            np.testing.assert_allclose(out, upsample_oracle(field, weights), atol=1e-12)

    def test_within_neighborhood_envelope(self, rng):
        field = rng.normal(size=(1, 1, 4, 4))
        out = convex_upsample(Tensor(field, dtype="fp64"), Tensor(random_convex_weights(rng, 1, 4, 4), dtype="fp64")).data
        padded = np.pad(field, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        for i in range(4):
            for j in range(4):
                hood = padded[0, 0, i:i + 3, j:j + 3]
                cell = out[0, 0, 8 * i:8 * i + 8, 8 * j:8 * j + 8]
                assert cell.min() >= hood.min() - 1e-12 and cell.max() <= hood.max() + 1e-12


class TestEmbedding:
    def test_first_row(self):
        emb = sinusoidal_embedding(3, 6)
        np.testing.assert_allclose(emb[0], [0, 1, 0, 1, 0, 1])
        assert abs(emb[1, 0] - math.sin(1.0)) < 1e-12

    def test_odd_width(self):
        with pytest.raises(ConfigError):
            sinusoidal_embedding(2, 5)

    def test_window_context_adds_embedding(self, rng):
        context = Tensor(rng.normal(size=(4, 2, 2)), dtype="fp64")
        out = window_context(context, 3).data
        emb = sinusoidal_embedding(3, 4)
        np.testing.assert_allclose(out - context.data[None], np.broadcast_to(emb[:, :, None, None], out.shape))


class TestRefine:
    def _inputs(self, rng, cfg, s=3, h=4, w=4):
        query = Tensor(rng.normal(size=(2 * cfg.hidden_dim, h, w)))
        frames = Tensor(rng.normal(size=(s, 2 * cfg.hidden_dim, h, w)))
        pyramid = CorrPyramid(query, frames, cfg.corr_levels, cfg.corr_radius)
        context = window_context(query[:cfg.hidden_dim], s)
        state = TrackState(
            Tensor(np.zeros((s, 2, h, w))), Tensor(np.zeros((s, 1, h, w))),
            Tensor(np.zeros((s, 1, h, w))), Tensor(rng.normal(size=(s, cfg.hidden_dim, h, w))),
        )
        return state, pyramid, context

    def test_single_iteration(self, rng):
        cfg = small_refiner_config()
        refiner = Refiner(rng, cfg)
        with no_grad():
            states = refiner.refine(*self._inputs(rng, cfg), iters=1)
        assert len(states) == 1

    def test_returns_every_step(self, rng):
        cfg = small_refiner_config(iters=3)
        refiner = Refiner(rng, cfg)
        with no_grad():
            states = refiner.refine(*self._inputs(rng, cfg))
            full = refiner.upsample(states[-1])
        assert len(states) == 3
        assert full.shape == (3, 4, 32, 32)

    def test_zero_iterations_rejected(self, rng):
        cfg = small_refiner_config()
        with pytest.raises(ConfigError):
            Refiner(rng, cfg).refine(*self._inputs(rng, cfg), iters=0)
