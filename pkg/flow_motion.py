# flow_motion.py
# Classical flow estimation and flow-derived motion masks

import math
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from tensor_core import ShapeError, Tensor, bilinear_sample

logger = logging.getLogger("FlowMotion")

# H×W×2 arrays of (dx, dy) in pixels
FlowField = np.ndarray
# H×W arrays in [0, 1]
MotionMask = np.ndarray


@dataclass(frozen=True)
class FlowConfig:
    """
    Block matcher settings; search is in coarse-level pixels. `motion_penalty`
    is added to the mean absolute difference per pixel of flow magnitude and
    `consistency` is the forward-backward tolerance in pixels (0 disables).
    """
    block: int = 8
    search: int = 4
    downscale: int = 4
    motion_penalty: float = 0.005
    consistency: float = 1.0

    def validate(self) -> "FlowConfig":
        if self.block < 1 or self.search < 1:
            raise ValueError(f"block and search must be positive, got {self.block}, {self.search}")
        if self.downscale < 1 or self.downscale & (self.downscale - 1):
            raise ValueError(f"downscale must be a power of two, got {self.downscale}")
        if self.motion_penalty < 0 or self.consistency < 0:
            raise ValueError(f"motion_penalty and consistency must be non-negative, "
                             f"got {self.motion_penalty}, {self.consistency}")
        return self

    @property
    def max_displacement(self) -> float:
        return float(self.search * self.downscale)


def _candidates(radius: int) -> List[Tuple[int, int]]:
    """Displacements in tie-break order: smallest |d|², then (dy, dx)"""
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(offsets, key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))


def _window(size: int) -> int:
    size = max(3, size)
    return size if size % 2 else size + 1


def _halve(image: np.ndarray) -> np.ndarray:
    """2×2 block mean; odd extents are edge-padded first"""
    h, w = image.shape
    padded = np.pad(image, ((0, h % 2), (0, w % 2)), mode="edge")
    return padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2).mean(axis=(1, 3))


def _sample(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """image(p + flow(p)) with clamp-to-edge bilinear reads"""
    h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = [np.clip(ys + flow[..., 1], 0, h - 1), np.clip(xs + flow[..., 0], 0, w - 1)]
    return ndimage.map_coordinates(image, coords, order=1, mode="nearest")


def _window_cost(a: np.ndarray, shifted: np.ndarray, window: int) -> np.ndarray:
    """Mean absolute difference of the best window×window block that contains each pixel"""
    cost = ndimage.uniform_filter(np.abs(a - shifted), size=window, mode="nearest")
    return ndimage.minimum_filter(cost, size=window, mode="nearest")


def _match(a: np.ndarray, b: np.ndarray, bases: List[np.ndarray], radius: int, window: int,
           penalty: float) -> np.ndarray:
    """
    Dense search of ±radius around every field in `bases`. A candidate costs its
    window SAD plus `penalty`·|flow|; the first minimum in base order, then
    candidate order, wins.
    """
    best_cost = np.full(a.shape, np.inf)
    best = np.zeros(a.shape + (2,))
    for base in bases:
        for dy, dx in _candidates(radius):
            flow = base + np.array([dx, dy], dtype=np.float64)
            cost = _window_cost(a, _sample(b, flow), window) + penalty * flow_magnitude(flow)
            better = cost < best_cost
            best_cost[better] = cost[better]
            best[better] = flow[better]
    return best


def _upsample(flow: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a flow to `shape`, vectors scaled by the size ratio"""
    h, w = flow.shape[:2]
    factor = (shape[0] / h, shape[1] / w)
    resized = np.stack(
        [ndimage.zoom(flow[..., c], factor, order=1, mode="nearest", grid_mode=True) for c in range(2)],
        axis=-1,
    )
    resized = resized[:shape[0], :shape[1]]
    resized[..., 0] *= shape[1] / w
    resized[..., 1] *= shape[0] / h
    return resized


def clamp_magnitude(flow: FlowField, limit: float) -> FlowField:
    """Shrink vectors longer than `limit` to that length, keeping their direction"""
    flow = np.asarray(flow, dtype=np.float64)
    magnitude = flow_magnitude(flow)
    scale = np.where(magnitude > limit, limit / np.maximum(magnitude, 1e-12), 1.0)
    return flow * scale[..., None]


def consistent_flow(flow_ab: FlowField, flow_ba: FlowField, tolerance: float) -> np.ndarray:
    """True where following flow_ab then flow_ba returns within `tolerance` pixels"""
    back = np.stack([_sample(flow_ba[..., c], flow_ab) for c in range(2)], axis=-1)
    return flow_magnitude(flow_ab + back) <= tolerance


def _pyramid_flow(a: np.ndarray, b: np.ndarray, config: FlowConfig) -> np.ndarray:
    levels = int(round(math.log2(config.downscale)))
    pyramid = [(a, b)]
    for _ in range(levels):
        pa, pb = pyramid[-1]
        pyramid.append((_halve(pa), _halve(pb)))

    coarse_a, coarse_b = pyramid[-1]
    scale = 2 ** levels
    flow = _match(coarse_a, coarse_b, [np.zeros(coarse_a.shape + (2,))], config.search,
                  _window(config.block // scale), config.motion_penalty * scale)
    for level in range(levels - 1, -1, -1):
        la, lb = pyramid[level]
        flow = _upsample(flow, la.shape)
        # static hypotheses stay reachable when the coarse level drifted
        flow = _match(la, lb, [np.zeros_like(flow), flow], 1,
                      _window(config.block // 2 ** level), config.motion_penalty * 2 ** level)
    return clamp_magnitude(flow, config.max_displacement)


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray, config: FlowConfig = FlowConfig()) -> FlowField:
    """
    Estimate flow such that frame_a(p) ≈ frame_b(p + flow(p)).

    Exhaustive matching at 1/downscale resolution, then ±1 px refinement at
    every finer level of a 2× pyramid around both the upsampled estimate and
    zero. Windows may shift to any position that still covers the pixel, so
    object edges are not smeared into the background. Longer vectors pay
    `motion_penalty`, and vectors the reverse estimate does not confirm are
    set to zero.

    Args:
        frame_a: gray H×W frame in [0, 1]
        frame_b: gray H×W frame of the same size
        config: block size, search radius, downscale factor and regularizers

    Returns:
        H×W×2 float32 flow with every vector no longer than search·downscale
    """
    config.validate()
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError("estimate_flow", "frames must be H×W and of equal size", frame_a=a.shape, frame_b=b.shape)
    minimum = config.block * config.downscale
    if min(a.shape) < minimum:
        raise ShapeError("estimate_flow", f"frames must be at least {minimum}×{minimum}", frame_a=a.shape)

    flow = _pyramid_flow(a, b, config)
    if config.consistency > 0:
        reverse = _pyramid_flow(b, a, config)
        rejected = ~consistent_flow(flow, reverse, config.consistency)
        flow[rejected] = 0.0
        logger.debug(f"estimate_flow: {rejected.mean():.1%} of vectors failed the reverse check")

    flow = flow.astype(np.float32)
    logger.debug(f"estimate_flow {a.shape}: mean |flow| {flow_magnitude(flow).mean():.3f}")
    return flow


def check_flow(flow: np.ndarray, shape: Tuple[int, int], op: str = "flow") -> np.ndarray:
    flow = np.asarray(flow)
    if flow.shape != tuple(shape) + (2,):
        raise ShapeError(op, "flow must be H×W×2 matching the frame", flow=flow.shape, frame=shape)
    if not np.all(np.isfinite(flow)):
        raise ValueError(f"{op}: flow contains non-finite values")
    return flow


def mean_flow(flow_prev: FlowField, flow_next: FlowField) -> FlowField:
    """Average of the two neighbour flows, the initial estimate for the centre frame"""
    if np.shape(flow_prev) != np.shape(flow_next):
        raise ShapeError("mean_flow", "flows must have equal shapes",
                         flow_prev=np.shape(flow_prev), flow_next=np.shape(flow_next))
    return (np.asarray(flow_prev) + np.asarray(flow_next)) / 2


def flow_magnitude(flow: FlowField) -> np.ndarray:
    flow = np.asarray(flow, dtype=np.float64)
    return np.sqrt(flow[..., 0] ** 2 + flow[..., 1] ** 2)


def motion_mask(flow_prev: FlowField, flow_next: FlowField, percentile: float = 99.0) -> MotionMask:
    """
    Per-pixel max of the two flow magnitudes divided by its `percentile`
    (floored at 1e-6), clamped to [0, 1]
    """
    if np.shape(flow_prev) != np.shape(flow_next):
        raise ShapeError("motion_mask", "flows must have equal shapes",
                         flow_prev=np.shape(flow_prev), flow_next=np.shape(flow_next))
    magnitude = np.maximum(flow_magnitude(flow_prev), flow_magnitude(flow_next))
    scale = max(float(np.percentile(magnitude, percentile)), 1e-6)
    return np.clip(magnitude / scale, 0.0, 1.0).astype(np.float32)


def binarize_gate(mask: MotionMask, theta: float) -> np.ndarray:
    """1 where mask >= theta else 0"""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"gate threshold must lie in [0, 1], got {theta}")
    return (np.asarray(mask) >= theta).astype(np.float32)


def warp_image(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Backward-warp a gray frame: out(p) = image(p + flow(p))"""
    image = np.asarray(image)
    warped = bilinear_sample(Tensor(image[None], dtype=np.float64), np.asarray(flow, dtype=np.float64))
    return warped.data[0]
