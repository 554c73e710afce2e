# metrics.py
# Fusion quality and temporal smoothness metrics, and the per-frame report

import os
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

from estimators import BlockMatchingEstimator, FlowEstimatorInterface
from flow_motion import warp_image
from loss import validity_masks
from media_io import list_frames, read_pgm
from tensor_core import ShapeError

logger = logging.getLogger("Metrics")

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float64)

# Edge-preservation sigmoid constants (strength g, orientation a)
KAPPA_G, SIGMA_G = -15.0, 0.5
KAPPA_A, SIGMA_A = -22.0, 0.8

SSIM_WINDOW = 7
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4

FRAME_METRICS = ("qabf", "piella_qs", "ssim")


def _check_triplet(op: str, ir: np.ndarray, vis: np.ndarray, fused: np.ndarray) -> None:
    if not (np.shape(ir) == np.shape(vis) == np.shape(fused)) or np.ndim(fused) != 2:
        raise ShapeError(op, "images must be H×W and of equal size",
                         ir=np.shape(ir), vis=np.shape(vis), fused=np.shape(fused))


def _edges(image: np.ndarray):
    """Sobel strength and orientation; vertical-only gradients map to π/2"""
    gx = ndimage.convolve(image, SOBEL_X, mode="reflect")
    gy = ndimage.convolve(image, SOBEL_Y, mode="reflect")
    strength = np.sqrt(gx * gx + gy * gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        angle = np.where(gx == 0, np.pi / 2, np.arctan(gy / np.where(gx == 0, 1.0, gx)))
    return strength, angle


def _preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    """Per-pixel edge preservation of one source in the fused image"""
    with np.errstate(divide="ignore", invalid="ignore"):
        relative = np.where(g_src > g_f, g_f / np.where(g_src == 0, 1.0, g_src),
                            np.where(g_f == 0, 0.0, g_src / np.where(g_f == 0, 1.0, g_f)))
    orientation = 1.0 - np.abs(a_src - a_f) / (np.pi / 2)
    gain_g = 1.0 + np.exp(KAPPA_G * (1.0 - SIGMA_G))
    gain_a = 1.0 + np.exp(KAPPA_A * (1.0 - SIGMA_A))
    q_g = gain_g / (1.0 + np.exp(KAPPA_G * (relative - SIGMA_G)))
    q_a = gain_a / (1.0 + np.exp(KAPPA_A * (orientation - SIGMA_A)))
    return q_g * q_a


def qabf(ir: np.ndarray, vis: np.ndarray, fused: np.ndarray) -> float:
    """
    Gradient-based fusion performance: how much of each source's edge
    strength and orientation survives in the fused image, weighted by the
    source edge strength. 1 means perfect preservation.
    """
    _check_triplet("qabf", ir, vis, fused)
    g_a, a_a = _edges(np.asarray(ir, dtype=np.float64))
    g_b, a_b = _edges(np.asarray(vis, dtype=np.float64))
    g_f, a_f = _edges(np.asarray(fused, dtype=np.float64))
    q_af = _preservation(g_a, a_a, g_f, a_f)
    q_bf = _preservation(g_b, a_b, g_f, a_f)
    total = float(np.sum(g_a + g_b))
    if total == 0:
        return 0.0
    return float(np.sum(q_af * g_a + q_bf * g_b) / total)


def _local_stats(a: np.ndarray, b: np.ndarray, window: int):
    """Valid-window means, variances and covariance"""
    r = window // 2
    inner = (slice(r, a.shape[0] - r), slice(r, a.shape[1] - r))
    mean = lambda x: ndimage.uniform_filter(x, size=window, mode="reflect")[inner]
    mu_a, mu_b = mean(a), mean(b)
    var_a = mean(a * a) - mu_a * mu_a
    var_b = mean(b * b) - mu_b * mu_b
    cov = mean(a * b) - mu_a * mu_b
    return mu_a, mu_b, np.maximum(var_a, 0.0), np.maximum(var_b, 0.0), cov


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or min(a.shape) < window:
        raise ShapeError("ssim", f"images must match and be at least {window}×{window}", a=a.shape, b=b.shape)
    mu_a, mu_b, var_a, var_b, cov = _local_stats(a, b, window)
    return ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / \
        ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    return float(np.mean(ssim_map(a, b, window)))


def piella_qs(ir: np.ndarray, vis: np.ndarray, fused: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """
    Saliency-weighted structural similarity: each window blends SSIM(F, ir) and
    SSIM(F, vis) by the sources' relative local variance. Negative window
    scores count as 0, so the result lies in [0, 1].
    """
    _check_triplet("piella_qs", ir, vis, fused)
    ir = np.asarray(ir, dtype=np.float64)
    vis = np.asarray(vis, dtype=np.float64)
    fused = np.asarray(fused, dtype=np.float64)
    q_a = np.clip(ssim_map(fused, ir, window), 0.0, 1.0)
    q_b = np.clip(ssim_map(fused, vis, window), 0.0, 1.0)
    _, _, s_a, s_b, _ = _local_stats(ir, vis, window)
    total = s_a + s_b
    lam = np.where(total > 0, s_a / np.where(total > 0, total, 1.0), 0.5)
    return float(np.mean(lam * q_a + (1.0 - lam) * q_b))


def _warp_error(frames: np.ndarray, flows: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """Mean over pairs of the valid-pixel L1 between frame t and frame t-1 warped onto it"""
    errors = []
    for t in range(1, len(frames)):
        mask = masks[t - 1]
        if not mask.any():
            errors.append(0.0)
            continue
        warped = warp_image(frames[t - 1], flows[t - 1])
        errors.append(float(np.abs(frames[t] - warped)[mask].mean()))
    return float(np.mean(errors))


def ms2r_proxy(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray,
               estimator: Optional[FlowEstimatorInterface] = None, eps: float = 1.0) -> float:
    """
    Motion smoothness against both reference videos, lower is better.
    Warp error of the fused video divided by the mean warp error of the two
    references, using flows averaged over the ir and vis estimates.
    """
    fused, ir, vis = (np.asarray(x, dtype=np.float64) for x in (fused, ir, vis))
    if len(fused) < 2:
        raise ValueError(f"ms2r_proxy needs at least 2 frames, got {len(fused)}")
    if not (fused.shape == ir.shape == vis.shape):
        raise ShapeError("ms2r_proxy", "sequences must be aligned", fused=fused.shape, ir=ir.shape, vis=vis.shape)
    estimator = estimator or BlockMatchingEstimator()
    flows_ir = estimator.run_pipeline(list(ir))
    flows_vis = estimator.run_pipeline(list(vis))

    flows, masks = [], []
    for t in range(1, len(fused)):
        backward_flow = (flows_ir["prev"][t] + flows_vis["prev"][t]) / 2
        forward_flow = (flows_ir["next"][t - 1] + flows_vis["next"][t - 1]) / 2
        flows.append(backward_flow)
        masks.append(validity_masks(backward_flow, forward_flow, eps))

    fused_error = _warp_error(fused, flows, masks)
    reference_error = (_warp_error(ir, flows, masks) + _warp_error(vis, flows, masks)) / 2
    if fused_error == 0:
        return 0.0
    return fused_error / max(reference_error, 1e-6)


@dataclass
class MetricReport:
    """Per-frame metric values plus sequence-level scores"""
    frame_count: int
    per_frame: Dict[str, List[float]] = field(default_factory=dict)
    sequence: Dict[str, float] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return list(self.per_frame) + list(self.sequence)

    def means(self) -> Dict[str, float]:
        return {name: float(np.mean(values)) for name, values in self.per_frame.items()}

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for index in range(self.frame_count):
            for name, values in self.per_frame.items():
                rows.append({"frame": str(index), "metric": name, "value": values[index]})
        for name, value in self.means().items():
            rows.append({"frame": "mean", "metric": name, "value": value})
        for name, value in self.sequence.items():
            rows.append({"frame": "sequence", "metric": name, "value": value})
        return pd.DataFrame(rows, columns=["frame", "metric", "value"])


def frame_metrics(ir: np.ndarray, vis: np.ndarray, fused: np.ndarray) -> Dict[str, float]:
    return {
        "qabf": qabf(ir, vis, fused),
        "piella_qs": piella_qs(ir, vis, fused),
        "ssim": (ssim(fused, ir) + ssim(fused, vis)) / 2,
    }


def evaluate(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray,
             estimator: Optional[FlowEstimatorInterface] = None, jobs: int = 1) -> MetricReport:
    """Score aligned T×H×W sequences"""
    if not (len(fused) == len(ir) == len(vis)):
        raise ShapeError("evaluate", "sequences must have equal length",
                         fused=(len(fused),), ir=(len(ir),), vis=(len(vis),))
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        scores = list(pool.map(frame_metrics, ir, vis, fused))
    report = MetricReport(frame_count=len(fused))
    for name in FRAME_METRICS:
        report.per_frame[name] = [s[name] for s in scores]
    if len(fused) >= 2:
        report.sequence["ms2r_proxy"] = ms2r_proxy(fused, ir, vis, estimator)
    else:
        logger.warning("Single-frame sequence: ms2r_proxy skipped")
    return report


def _load_sequence(directory: str, shape=None):
    frames = []
    for path in list_frames(directory):
        frame = read_pgm(path)
        expected = shape or (frames[0].shape if frames else None)
        if expected is not None and frame.shape != expected:
            raise ShapeError("report", f"{path} does not match the sequence frame size",
                             frame=frame.shape, expected=expected)
        frames.append(frame)
    return frames


def report(fused_dir: str, ir_dir: str, vis_dir: str,
           estimator: Optional[FlowEstimatorInterface] = None, jobs: int = 1) -> MetricReport:
    """Load three frame directories and score them"""
    fused = _load_sequence(fused_dir)
    if not fused:
        raise FileNotFoundError(f"no frames in {fused_dir}")
    shape = fused[0].shape
    ir = _load_sequence(ir_dir, shape)
    vis = _load_sequence(vis_dir, shape)
    for directory, frames in ((ir_dir, ir), (vis_dir, vis)):
        if len(frames) != len(fused):
            raise ShapeError("report", f"{os.path.normpath(directory)} has {len(frames)} frames, expected {len(fused)}")
    logger.info(f"Scoring {len(fused)} frames of {shape}")
    return evaluate(np.stack(fused), np.stack(ir), np.stack(vis), estimator, jobs)
