# block_matching_estimator.py
import logging
from typing import Optional, Tuple

import numpy as np

from flow_motion import FlowConfig, estimate_flow
from .estimator_interface import FlowEstimatorInterface

logger = logging.getLogger("BlockMatchingEstimator")


class BlockMatchingEstimator(FlowEstimatorInterface):
    """Coarse-to-fine SAD block matcher"""

    def __init__(self, config: Optional[FlowConfig] = None):
        self.config = config or FlowConfig()

    def prepare(self) -> bool:
        try:
            self.config.validate()
        except ValueError as e:
            logger.error(f"Invalid block matcher settings: {str(e)}")
            return False
        return True

    def estimate(self, frame_a: np.ndarray, frame_b: np.ndarray,
                 pair: Optional[Tuple[int, int]] = None) -> np.ndarray:
        return estimate_flow(frame_a, frame_b, self.config)
