import numpy as np
import pytest
from scipy import ndimage

import tensor_core as tc
from mafm import (MafmWeights, apply_residual, coarse_align, mafm_forward, motion_gate, parameter_count,
                  refine_residual, temporal_aggregate, temporal_weights, unaligned_mean)
from tensor_core import ShapeError, Tensor

C, H, W = 2, 6, 8


def warp_oracle(feature, flow):
    """Clamped bilinear read of every channel at p + flow(p)"""
    h, w = feature.shape[1:]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [np.clip(ys + flow[..., 1], 0, h - 1), np.clip(xs + flow[..., 0], 0, w - 1)]
    return np.stack([ndimage.map_coordinates(channel, coords, order=1, mode="nearest") for channel in feature])


def uniform_flow(dx, dy, shape=(H, W)):
    flow = np.zeros(shape + (2,))
    flow[..., 0] = dx
    flow[..., 1] = dy
    return flow


@pytest.fixture
def features(rng):
    with tc.precision(np.float64):
        return [Tensor(rng.standard_normal((C, H, W))) for _ in range(4)]


@pytest.fixture
def ramp():
    return Tensor(np.tile(np.arange(W, dtype=np.float64), (C, H, 1)), dtype=np.float64)


class TestCoarseAlign:

    def test_zero_flows_keep_inputs(self, features):
        prev, cur, nxt, _ = features
        zero = np.zeros((H, W, 2))
        triplet = coarse_align(prev, cur, nxt, zero, zero)
        for warped, original in ((triplet.prev, prev), (triplet.center, cur), (triplet.next, nxt)):
            np.testing.assert_array_equal(warped.data, original.data)

    def test_center_uses_mean_flow(self, ramp):
        triplet = coarse_align(ramp, ramp, ramp, uniform_flow(2, 0), np.zeros((H, W, 2)))
        np.testing.assert_allclose(triplet.flow_t, uniform_flow(1, 0))
        np.testing.assert_allclose(triplet.center.data[..., :-1], ramp.data[..., 1:])

    def test_matches_per_slice_warp(self, features, rng):
        prev, cur, nxt, _ = features
        flow_prev, flow_next = rng.uniform(-2, 2, (2, H, W, 2))
        triplet = coarse_align(prev, cur, nxt, flow_prev, flow_next)
        np.testing.assert_allclose(triplet.prev.data, warp_oracle(prev.data, flow_prev), atol=1e-10)
        np.testing.assert_allclose(triplet.next.data, warp_oracle(nxt.data, flow_next), atol=1e-10)
        np.testing.assert_allclose(triplet.center.data, warp_oracle(cur.data, (flow_prev + flow_next) / 2),
                                   atol=1e-10)

    def test_shape_mismatch(self, features):
        prev, cur, _, _ = features
        with pytest.raises(ShapeError):
            coarse_align(prev, cur, Tensor(np.zeros((C, H, W + 1))), np.zeros((H, W, 2)), np.zeros((H, W, 2)))


class TestRefineResidual:

    def test_untrained_head_predicts_zero(self, features, rng):
        prev, cur, nxt, anchor = features
        with tc.precision(np.float64):
            weights = MafmWeights.init(rng, C)
        triplet = coarse_align(prev, cur, nxt, rng.standard_normal((H, W, 2)), rng.standard_normal((H, W, 2)))
        delta = refine_residual(anchor, triplet, weights)
        assert delta.shape == (H, W, 2)
        np.testing.assert_array_equal(delta.data, 0.0)

    def test_all_zero_weights(self, features, rng):
        prev, cur, nxt, anchor = features
        with tc.precision(np.float64):
            weights = MafmWeights.init(rng, C)
        for tensor in weights.named("m").values():
            tensor.data[...] = 0.0
        triplet = coarse_align(prev, cur, nxt, np.zeros((H, W, 2)), np.zeros((H, W, 2)))
        np.testing.assert_array_equal(refine_residual(anchor, triplet, weights).data, 0.0)

    def test_anchor_shape_mismatch(self, features, rng):
        prev, cur, nxt, _ = features
        weights = MafmWeights.init(rng, C)
        triplet = coarse_align(prev, cur, nxt, np.zeros((H, W, 2)), np.zeros((H, W, 2)))
        with pytest.raises(ShapeError):
            refine_residual(Tensor(np.zeros((C, H, W - 1))), triplet, weights)

    def test_gradient_matches_finite_differences(self, features, rng):
        prev, cur, nxt, anchor = features
        with tc.precision(np.float64):
            weights = MafmWeights.init(rng, C)
            weights.project_w.data[...] = rng.standard_normal(weights.project_w.shape)
            triplet = coarse_align(prev, cur, nxt, rng.uniform(-1, 1, (H, W, 2)), rng.uniform(-1, 1, (H, W, 2)))
            target = rng.standard_normal((H, W, 2))

            def fn():
                return tc.sum_(tc.mul(refine_residual(anchor, triplet, weights), target))
            targets = [weights.compress_w, weights.depthwise, weights.project_w, anchor]
            assert tc.gradient_check(fn, targets, h=1e-4) < 1e-3


class TestApplyResidual:

    def test_zero_residual_equals_coarse_center(self, features, rng):
        prev, cur, nxt, _ = features
        triplet = coarse_align(prev, cur, nxt, rng.uniform(-2, 2, (H, W, 2)), rng.uniform(-2, 2, (H, W, 2)))
        out = apply_residual(cur, triplet.flow_t, Tensor(np.zeros((H, W, 2)), dtype=np.float64))
        np.testing.assert_allclose(out.data, triplet.center.data, atol=1e-12)

    def test_residual_only_shift(self, ramp):
        out = apply_residual(ramp, np.zeros((H, W, 2)), Tensor(uniform_flow(1, 0), dtype=np.float64))
        np.testing.assert_allclose(out.data[..., :-1], ramp.data[..., 1:])

    def test_composed_flow_oracle(self, features, rng):
        cur = features[1]
        flow_t, delta = rng.uniform(-1.5, 1.5, (2, H, W, 2))
        out = apply_residual(cur, flow_t, Tensor(delta, dtype=np.float64))
        np.testing.assert_allclose(out.data, warp_oracle(cur.data, flow_t + delta), atol=1e-10)

    def test_shape_mismatch(self, features):
        with pytest.raises(ShapeError):
            apply_residual(features[1], np.zeros((H, W, 2)), Tensor(np.zeros((H, W - 1, 2))))


class TestTemporalAggregate:

    def test_zero_logits_average(self, features):
        prev, cur, nxt, _ = features
        out = temporal_aggregate(prev, cur, nxt, Tensor(np.zeros(3), dtype=np.float64))
        np.testing.assert_allclose(out.data, (prev.data + cur.data + nxt.data) / 3, atol=1e-12)

    def test_dominant_logit(self, features):
        prev, cur, nxt, _ = features
        out = temporal_aggregate(prev, cur, nxt, Tensor([20.0, -20.0, -20.0], dtype=np.float64))
        np.testing.assert_allclose(out.data, prev.data, atol=1e-6)

    def test_softmax_weighted_sum_oracle(self, features, rng):
        prev, cur, nxt, _ = features
        omega = rng.standard_normal(3)
        weights = np.exp(omega) / np.exp(omega).sum()
        out = temporal_aggregate(prev, cur, nxt, Tensor(omega, dtype=np.float64))
        expected = weights[0] * prev.data + weights[1] * cur.data + weights[2] * nxt.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_weights_sum_to_one(self, rng):
        for _ in range(10):
            omega = Tensor(rng.standard_normal(3) * 10, dtype=np.float64)
            assert temporal_weights(omega).data.sum() == pytest.approx(1.0, abs=1e-12)


class TestMotionGate:

    def test_closed_gate_keeps_current_frame(self, features):
        agg, cur = features[0], features[1]
        np.testing.assert_array_equal(motion_gate(agg, cur, np.zeros((H, W))).data, cur.data)

    def test_open_gate_takes_aggregate(self, features):
        agg, cur = features[0], features[1]
        np.testing.assert_array_equal(motion_gate(agg, cur, np.ones((H, W))).data, agg.data)

    def test_checkerboard(self, features):
        agg, cur = features[0], features[1]
        gate = (np.indices((H, W)).sum(axis=0) % 2).astype(np.float64)
        expected = gate * agg.data + (1 - gate) * cur.data
        np.testing.assert_array_equal(motion_gate(agg, cur, gate).data, expected)

    def test_gate_shape_checked(self, features):
        with pytest.raises(ShapeError):
            motion_gate(features[0], features[1], np.ones((H, W + 1)))


class TestMafmForward:

    def test_identity_collapse(self, features, rng):
        prev, cur, nxt, anchor = features
        with tc.precision(np.float64):
            weights = MafmWeights.init(rng, C)
        weights.omega.data[...] = [-20.0, 20.0, -20.0]
        zero = np.zeros((H, W, 2))
        out = mafm_forward(prev, cur, nxt, anchor, zero, zero, np.ones((H, W)), weights)
        np.testing.assert_allclose(out.data, cur.data, atol=1e-5)

    def test_static_pixels_untouched(self, features, rng):
        prev, cur, nxt, anchor = features
        with tc.precision(np.float64):
            weights = MafmWeights.init(rng, C)
        weights.project_w.data[...] = rng.standard_normal(weights.project_w.shape)
        gate = (rng.random((H, W)) > 0.5).astype(np.float64)
        out = mafm_forward(prev, cur, nxt, anchor, rng.uniform(-2, 2, (H, W, 2)),
                           rng.uniform(-2, 2, (H, W, 2)), gate, weights)
        static = gate == 0
        np.testing.assert_array_equal(out.data[:, static], cur.data[:, static])

    def test_unaligned_mode(self, features, rng):
        prev, cur, nxt, anchor = features
        weights = MafmWeights.init(rng, C)
        flow = rng.uniform(-2, 2, (H, W, 2))
        out = mafm_forward(prev, cur, nxt, anchor, flow, flow, np.ones((H, W)), weights, aligned=False)
        np.testing.assert_allclose(out.data, unaligned_mean(prev, cur, nxt).data)
        np.testing.assert_allclose(out.data, (prev.data + cur.data + nxt.data) / 3, atol=1e-12)


class TestWeights:

    def test_parameter_count_matches_tensors(self, rng):
        weights = MafmWeights.init(rng, 5)
        assert sum(t.size for t in weights.named("m").values()) == sum(parameter_count(5).values())

    def test_projection_has_two_channels(self, rng):
        weights = MafmWeights.init(rng, 3)
        assert weights.project_w.shape == (2, 3, 1, 1)
        assert weights.omega.shape == (3,)

    def test_named_round_trip(self, rng):
        weights = MafmWeights.init(rng, 3)
        store = {name: t.numpy() for name, t in weights.named("mafm_ir").items()}
        rebuilt = MafmWeights.from_named(store, "mafm_ir")
        for name, tensor in rebuilt.named("mafm_ir").items():
            np.testing.assert_array_equal(tensor.data, store[name])
