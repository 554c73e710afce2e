# loss.py
# Spatial fidelity, temporal consistency and total training losses

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

import tensor_core as tc
from flow_motion import FlowField, flow_magnitude
from tensor_core import ShapeError, Tensor

logger = logging.getLogger("Loss")


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.0
    window: int = 7
    c1: float = 1e-4
    c2: float = 9e-4
    fb_eps: float = 1.0

    def validate(self) -> "LossConfig":
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.fb_eps <= 0:
            raise ValueError(f"fb_eps must be positive, got {self.fb_eps}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        return self


def _check_image(op: str, fused: Tensor, *others: np.ndarray) -> None:
    shapes = {"fused": fused.shape}
    shapes.update({f"source{i}": np.shape(o) for i, o in enumerate(others)})
    if fused.ndim != 2 or len(set(shapes.values())) != 1:
        raise ShapeError(op, "images must be H×W and of equal size", **shapes)


def pixel_loss(fused: Tensor, ir: np.ndarray, vis: np.ndarray) -> Tensor:
    """mean |F - max(ir, vis)|"""
    _check_image("pixel_loss", fused, ir, vis)
    target = np.maximum(ir, vis)
    return tc.mean(tc.abs_(tc.sub(fused, target)))


def ssim_map(fused: Tensor, reference: np.ndarray, config: LossConfig = LossConfig()) -> Tensor:
    """Local SSIM over valid window×window uniform windows"""
    _check_image("ssim", fused, reference)
    size = config.window
    ref = np.asarray(reference, dtype=fused.dtype)
    ref_t = Tensor(ref, dtype=fused.dtype)
    mu_x = tc.box_filter(fused, size)
    mu_y = tc.box_filter(ref_t, size).data
    var_x = tc.sub(tc.box_filter(tc.square(fused), size), tc.square(mu_x))
    var_y = tc.box_filter(Tensor(ref * ref, dtype=fused.dtype), size).data - mu_y * mu_y
    cov = tc.sub(tc.box_filter(tc.mul(fused, ref), size), tc.mul(mu_x, mu_y))

    luminance_num = tc.add(tc.mul(mu_x, 2.0 * mu_y), config.c1)
    structure_num = tc.add(tc.mul(cov, 2.0), config.c2)
    luminance_den = tc.add(tc.add(tc.square(mu_x), mu_y * mu_y), config.c1)
    structure_den = tc.add(tc.add(var_x, var_y), config.c2)
    return tc.div(tc.mul(luminance_num, structure_num), tc.mul(luminance_den, structure_den))


def ssim_loss(fused: Tensor, reference: np.ndarray, config: LossConfig = LossConfig()) -> Tensor:
    """1 - mean local SSIM"""
    return tc.add(tc.neg(tc.mean(ssim_map(fused, reference, config))), 1.0)


def spatial_loss(fused: Tensor, ir: np.ndarray, vis: np.ndarray, config: LossConfig = LossConfig()) -> Tensor:
    """Pixel loss plus the SSIM loss averaged over both sources"""
    structural = tc.mul(tc.add(ssim_loss(fused, ir, config), ssim_loss(fused, vis, config)), 0.5)
    return tc.add(pixel_loss(fused, ir, vis), structural)


def validity_masks(flow_fwd: FlowField, flow_bwd: FlowField, eps: float = 1.0) -> np.ndarray:
    """
    Forward-backward consistency: p is valid when
    ‖φ_fwd(p) + φ_bwd(p + φ_fwd(p))‖ < eps
    """
    flow_fwd = np.asarray(flow_fwd, dtype=np.float64)
    flow_bwd = np.asarray(flow_bwd, dtype=np.float64)
    if flow_fwd.shape != flow_bwd.shape:
        raise ShapeError("validity_masks", "flows must have equal shapes", flow_fwd=flow_fwd.shape, flow_bwd=flow_bwd.shape)
    back = tc.bilinear_sample(Tensor(flow_bwd.transpose(2, 0, 1), dtype=np.float64), flow_fwd).data.transpose(1, 2, 0)
    return flow_magnitude(flow_fwd + back) < eps


def warp_frame(frame: Tensor, flow: FlowField) -> Tensor:
    h, w = frame.shape
    return tc.reshape(tc.bilinear_sample(tc.reshape(frame, (1, h, w)), flow), (h, w))


def masked_l1(a: Tensor, b: Tensor, mask: np.ndarray) -> Tensor:
    """Mean |a - b| over valid pixels; zero when no pixel is valid"""
    mask = np.asarray(mask, dtype=a.dtype)
    count = float(mask.sum())
    if count == 0:
        return Tensor(0.0, dtype=a.dtype)
    return tc.mul(tc.sum_(tc.mul(tc.abs_(tc.sub(a, b)), mask)), 1.0 / count)


def temporal_loss(fused_prev: Optional[Tensor], fused_t: Tensor, fused_next: Optional[Tensor],
                  flow_prev: Optional[FlowField], flow_next: Optional[FlowField],
                  mask_prev: Optional[np.ndarray], mask_next: Optional[np.ndarray]) -> Tensor:
    """
    Masked L1 between the centre fused frame and each neighbour warped onto
    it, summed over the neighbours that exist
    """
    total = Tensor(0.0, dtype=fused_t.dtype)
    for neighbour, flow, mask in ((fused_prev, flow_prev, mask_prev), (fused_next, flow_next, mask_next)):
        if neighbour is None:
            continue
        if neighbour.shape != fused_t.shape:
            raise ShapeError("temporal_loss", "fused frames must share one shape",
                             centre=fused_t.shape, neighbour=neighbour.shape)
        warped = warp_frame(neighbour, flow)
        total = tc.add(total, masked_l1(fused_t, warped, mask))
    return total


def total_loss(spatial: Tensor, temporal: Tensor, gamma: float) -> Tensor:
    """L_spatial + γ·L_temporal"""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return tc.add(spatial, tc.mul(temporal, gamma))
