# estimator_interface.py
import logging
from abc import ABC, abstractmethod
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger("FlowEstimator")


class EstimatorError(RuntimeError):
    """A flow source could not prepare or returned an invalid field"""


class FlowEstimatorInterface(ABC):
    """Base interface for all flow sources"""

    @abstractmethod
    def prepare(self) -> bool:
        """Check the source is usable before any frames are processed"""
        pass

    @abstractmethod
    def estimate(self, frame_a: np.ndarray, frame_b: np.ndarray,
                 pair: Optional[Tuple[int, int]] = None) -> np.ndarray:
        """Flow such that frame_a(p) ≈ frame_b(p + flow(p)); `pair` holds the frame indices"""
        pass

    def validate(self, flow: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
        """Reject fields of the wrong shape or with non-finite values"""
        flow = np.asarray(flow, dtype=np.float32)
        if flow.shape != tuple(shape) + (2,):
            raise EstimatorError(
                f"{self.__class__.__name__} returned flow of shape {flow.shape}, expected {tuple(shape) + (2,)}"
            )
        if not np.all(np.isfinite(flow)):
            raise EstimatorError(f"{self.__class__.__name__} returned non-finite flow values")
        return flow

    def run_pipeline(self, frames: Sequence[np.ndarray]) -> Dict[str, List[np.ndarray]]:
        """
        Flows for every frame of a sequence: "prev"[t] maps frame t to t-1 and
        "next"[t] maps frame t to t+1. Missing neighbours at the sequence ends
        get zero flow.
        """
        if not self.prepare():
            raise EstimatorError(f"Preparation failed for {self.__class__.__name__}")

        count = len(frames)
        shape = np.shape(frames[0])
        zero = np.zeros(tuple(shape) + (2,), dtype=np.float32)
        flows: Dict[str, List[np.ndarray]] = {"prev": [], "next": []}
        for t in range(count):
            prev_flow = zero if t == 0 else self.validate(self.estimate(frames[t], frames[t - 1], (t, t - 1)), shape)
            next_flow = zero if t == count - 1 else self.validate(self.estimate(frames[t], frames[t + 1], (t, t + 1)), shape)
            flows["prev"].append(prev_flow)
            flows["next"].append(next_flow)
        logger.info(f"{self.__class__.__name__} produced flows for {count} frames")
        return flows
