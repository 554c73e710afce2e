# robustness_estimators.py
# Stand-ins that emulate failed flow estimation
import logging
from typing import Optional, Tuple

import numpy as np

from .estimator_interface import FlowEstimatorInterface

logger = logging.getLogger("RobustnessEstimators")


class ZeroFlowEstimator(FlowEstimatorInterface):
    """Every pixel static"""

    def prepare(self) -> bool:
        return True

    def estimate(self, frame_a: np.ndarray, frame_b: np.ndarray,
                 pair: Optional[Tuple[int, int]] = None) -> np.ndarray:
        return np.zeros(np.shape(frame_a) + (2,), dtype=np.float32)


class RandomFlowEstimator(FlowEstimatorInterface):
    """Uniform random fields in [-magnitude, magnitude], seeded per frame pair"""

    def __init__(self, magnitude: float = 4.0, seed: int = 0):
        self.magnitude = magnitude
        self.seed = seed

    def prepare(self) -> bool:
        if self.magnitude < 0:
            logger.error(f"Random flow magnitude must be non-negative, got {self.magnitude}")
            return False
        return True

    def estimate(self, frame_a: np.ndarray, frame_b: np.ndarray,
                 pair: Optional[Tuple[int, int]] = None) -> np.ndarray:
        a, b = pair if pair is not None else (0, 0)
        rng = np.random.default_rng([self.seed, a, b])
        shape = np.shape(frame_a) + (2,)
        return rng.uniform(-self.magnitude, self.magnitude, size=shape).astype(np.float32)
