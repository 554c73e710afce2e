from typing import Optional

from .estimator_interface import EstimatorError, FlowEstimatorInterface
from .block_matching_estimator import BlockMatchingEstimator
from .flo_file_estimator import FloFileEstimator
from .robustness_estimators import RandomFlowEstimator, ZeroFlowEstimator

FLOW_MODES = ("estimate", "zero", "random", "file")


def create_estimator(mode: str = "estimate", flow_dir: Optional[str] = None, seed: int = 0) -> FlowEstimatorInterface:
    """Build the flow source for a --flow-mode value"""
    if mode == "estimate":
        return BlockMatchingEstimator()
    if mode == "zero":
        return ZeroFlowEstimator()
    if mode == "random":
        return RandomFlowEstimator(seed=seed)
    if mode == "file":
        if not flow_dir:
            raise EstimatorError("flow mode 'file' needs a flow directory")
        return FloFileEstimator(flow_dir)
    raise EstimatorError(f"unknown flow mode '{mode}', expected one of {', '.join(FLOW_MODES)}")


__all__ = ['FlowEstimatorInterface', 'EstimatorError', 'BlockMatchingEstimator', 'FloFileEstimator',
           'ZeroFlowEstimator', 'RandomFlowEstimator', 'create_estimator', 'FLOW_MODES']
