# flo_file_estimator.py
import os
import logging
from typing import Optional, Tuple

import numpy as np

from media_io import flo_name, read_flo
from .estimator_interface import EstimatorError, FlowEstimatorInterface

logger = logging.getLogger("FloFileEstimator")


class FloFileEstimator(FlowEstimatorInterface):
    """Reads precomputed flows named <a>_<b>.flo from a directory"""

    def __init__(self, directory: str):
        self.directory = directory

    def prepare(self) -> bool:
        if not os.path.isdir(self.directory):
            logger.error(f"Flow directory not found: {self.directory}")
            return False
        count = sum(1 for name in os.listdir(self.directory) if name.endswith(".flo"))
        logger.info(f"Found {count} .flo files in {self.directory}")
        return True

    def estimate(self, frame_a: np.ndarray, frame_b: np.ndarray,
                 pair: Optional[Tuple[int, int]] = None) -> np.ndarray:
        if pair is None:
            raise EstimatorError("FloFileEstimator needs the frame indices of each pair")
        path = os.path.join(self.directory, flo_name(*pair))
        if not os.path.exists(path):
            raise EstimatorError(f"Missing flow file {path}")
        return read_flo(path)
