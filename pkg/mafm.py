# mafm.py
# Motion-aware feature alignment: coarse warp, cross-modal residual refinement,
# softmax temporal aggregation and motion gating

import logging
from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Dict, Mapping

import numpy as np

import tensor_core as tc
from flow_motion import FlowField, mean_flow
from tensor_core import ShapeError, Tensor

logger = logging.getLogger("Mafm")


@dataclass
class MafmWeights:
    """
    Residual-flow head (1×1 compress, depthwise 3×3, 1×1 project to 2
    channels) and the temporal logits ω for the t-1, t, t+1 features
    """
    compress_w: Tensor   # C × (4C+4) × 1 × 1
    compress_b: Tensor   # C
    depthwise: Tensor    # C × 3 × 3
    project_w: Tensor    # 2 × C × 1 × 1
    omega: Tensor        # 3

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "MafmWeights":
        """He-initialized head; the projection and ω start at zero"""
        in_ch = 4 * channels + 4
        return cls(
            compress_w=tc.parameter(tc.he_normal(rng, (channels, in_ch, 1, 1), in_ch)),
            compress_b=tc.parameter(np.zeros(channels)),
            depthwise=tc.parameter(tc.he_normal(rng, (channels, 3, 3), 9)),
            project_w=tc.parameter(np.zeros((2, channels, 1, 1))),
            omega=tc.parameter(np.zeros(3)),
        )

    def named(self, prefix: str) -> "OrderedDict[str, Tensor]":
        return OrderedDict((f"{prefix}.{f.name}", getattr(self, f.name)) for f in fields(self))

    @classmethod
    def from_named(cls, store: Mapping[str, np.ndarray], prefix: str) -> "MafmWeights":
        return cls(**{f.name: tc.parameter(store[f"{prefix}.{f.name}"]) for f in fields(cls)})


@dataclass
class AlignedTriplet:
    prev: Tensor
    center: Tensor
    next: Tensor
    flow_prev: FlowField
    flow_next: FlowField
    flow_t: FlowField


def _check_same(op: str, **tensors: Tensor) -> None:
    shapes = {name: t.shape for name, t in tensors.items()}
    if len(set(shapes.values())) != 1:
        raise ShapeError(op, "features must share one shape", **shapes)


def coarse_align(f_prev: Tensor, f_t: Tensor, f_next: Tensor,
                 flow_prev: FlowField, flow_next: FlowField) -> AlignedTriplet:
    """Warp the neighbours by their flows and the centre by the mean flow"""
    _check_same("coarse_align", f_prev=f_prev, f_t=f_t, f_next=f_next)
    flow_t = mean_flow(flow_prev, flow_next)
    return AlignedTriplet(
        prev=tc.bilinear_sample(f_prev, flow_prev),
        center=tc.bilinear_sample(f_t, flow_t),
        next=tc.bilinear_sample(f_next, flow_next),
        flow_prev=np.asarray(flow_prev),
        flow_next=np.asarray(flow_next),
        flow_t=flow_t,
    )


def refine_residual(anchor: Tensor, triplet: AlignedTriplet, weights: MafmWeights) -> Tensor:
    """
    Predict the residual flow Δφ (H×W×2) from the other modality's feature at t,
    the coarsely aligned triplet and both neighbour flows
    """
    if anchor.shape != triplet.center.shape:
        raise ShapeError("refine_residual", "anchor must match the aligned features",
                         anchor=anchor.shape, features=triplet.center.shape)
    flows = np.concatenate([triplet.flow_prev, triplet.flow_next], axis=-1).transpose(2, 0, 1)
    stacked = tc.concat([anchor, triplet.prev, triplet.center, triplet.next,
                         Tensor(flows, dtype=anchor.dtype)], axis=0)
    hidden = tc.leaky_relu(tc.conv2d(stacked, weights.compress_w, weights.compress_b))
    hidden = tc.depthwise_conv2d(hidden, weights.depthwise)
    residual = tc.conv2d(hidden, weights.project_w)
    return tc.chw_to_flow(residual)


def apply_residual(f_t: Tensor, flow_t: FlowField, delta: Tensor) -> Tensor:
    """Re-warp the centre feature with the compensated flow φ_t + Δφ"""
    flow = Tensor(flow_t, dtype=f_t.dtype)
    if flow.shape != delta.shape:
        raise ShapeError("apply_residual", "residual must match the flow", flow=flow.shape, residual=delta.shape)
    return tc.bilinear_sample(f_t, tc.add(delta, flow))


def temporal_weights(omega: Tensor) -> Tensor:
    return tc.softmax(omega)


def temporal_aggregate(f_prev: Tensor, f_t: Tensor, f_next: Tensor, omega: Tensor) -> Tensor:
    """Softmax(ω)-weighted sum of the three aligned features"""
    _check_same("temporal_aggregate", f_prev=f_prev, f_t=f_t, f_next=f_next)
    return tc.weighted_sum([f_prev, f_t, f_next], temporal_weights(omega))


def motion_gate(aggregated: Tensor, f_t: Tensor, gate: np.ndarray) -> Tensor:
    """Aggregated features where the gate is set, the current frame elsewhere"""
    return tc.select(gate, aggregated, f_t)


def unaligned_mean(f_prev: Tensor, f_t: Tensor, f_next: Tensor) -> Tensor:
    _check_same("unaligned_mean", f_prev=f_prev, f_t=f_t, f_next=f_next)
    return tc.mul(tc.add(tc.add(f_prev, f_t), f_next), 1.0 / 3.0)


def mafm_forward(f_prev: Tensor, f_t: Tensor, f_next: Tensor, anchor: Tensor,
                 flow_prev: FlowField, flow_next: FlowField, gate: np.ndarray,
                 weights: MafmWeights, aligned: bool = True) -> Tensor:
    """
    Full alignment pass for one modality. With `aligned` off the module
    collapses to the unaligned three-frame mean.
    """
    if not aligned:
        return unaligned_mean(f_prev, f_t, f_next)
    triplet = coarse_align(f_prev, f_t, f_next, flow_prev, flow_next)
    delta = refine_residual(anchor, triplet, weights)
    center = apply_residual(f_t, triplet.flow_t, delta)
    aggregated = temporal_aggregate(triplet.prev, center, triplet.next, weights.omega)
    return motion_gate(aggregated, f_t, gate)


def parameter_count(channels: int) -> Dict[str, int]:
    in_ch = 4 * channels + 4
    return {
        "compress": channels * in_ch + channels,
        "depthwise": channels * 9,
        "project": 2 * channels,
        "omega": 3,
    }
