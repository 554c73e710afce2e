import os

import numpy as np
import pytest

from estimators import (BlockMatchingEstimator, EstimatorError, FloFileEstimator, FlowEstimatorInterface,
                        RandomFlowEstimator, ZeroFlowEstimator, create_estimator)
from flow_motion import FlowConfig
from synth_data import write_scene


class WrongShapeEstimator(FlowEstimatorInterface):

    def prepare(self) -> bool:
        return True

    def estimate(self, frame_a, frame_b, pair=None):
        return np.zeros((2, 2, 2))


class TestRunPipeline:

    def test_zero_estimator_layout(self, tiny_scene):
        flows = ZeroFlowEstimator().run_pipeline(list(tiny_scene.vis))
        assert len(flows["prev"]) == len(flows["next"]) == 3
        for field in flows["prev"] + flows["next"]:
            assert field.shape == (32, 32, 2)
            np.testing.assert_array_equal(field, 0.0)

    def test_sequence_ends_get_zero_flow(self, tiny_scene):
        flows = RandomFlowEstimator(seed=3).run_pipeline(list(tiny_scene.vis))
        np.testing.assert_array_equal(flows["prev"][0], 0.0)
        np.testing.assert_array_equal(flows["next"][-1], 0.0)
        assert np.abs(flows["next"][0]).max() > 0

    def test_wrong_shape_rejected(self, tiny_scene):
        with pytest.raises(EstimatorError, match="shape"):
            WrongShapeEstimator().run_pipeline(list(tiny_scene.vis))

    def test_failed_preparation(self, tiny_scene):
        with pytest.raises(EstimatorError, match="Preparation failed"):
            BlockMatchingEstimator(FlowConfig(downscale=3)).run_pipeline(list(tiny_scene.vis))


class TestFloFileEstimator:

    def test_reads_ground_truth_flows(self, tiny_scene, tmp_path):
        layout = write_scene(tiny_scene, str(tmp_path))
        flows = FloFileEstimator(layout["flow"]).run_pipeline(list(tiny_scene.vis))
        np.testing.assert_array_equal(flows["next"][0], tiny_scene.flows[(0, 1)])
        np.testing.assert_array_equal(flows["prev"][1], tiny_scene.flows[(1, 0)])
        np.testing.assert_array_equal(flows["next"][1], tiny_scene.flows[(1, 2)])

    def test_missing_directory(self, tiny_scene, tmp_path):
        with pytest.raises(EstimatorError):
            FloFileEstimator(str(tmp_path / "absent")).run_pipeline(list(tiny_scene.vis))

    def test_missing_file(self, tiny_scene, tmp_path):
        layout = write_scene(tiny_scene, str(tmp_path))
        os.remove(os.path.join(layout["flow"], "0001_0002.flo"))
        with pytest.raises(EstimatorError, match="0001_0002.flo"):
            FloFileEstimator(layout["flow"]).run_pipeline(list(tiny_scene.vis))

    def test_needs_frame_indices(self, tmp_path):
        with pytest.raises(EstimatorError):
            FloFileEstimator(str(tmp_path)).estimate(np.zeros((4, 4)), np.zeros((4, 4)))


class TestRandomFlowEstimator:

    def test_seeded_per_pair(self):
        frame = np.zeros((8, 8))
        a = RandomFlowEstimator(seed=1).estimate(frame, frame, (0, 1))
        b = RandomFlowEstimator(seed=1).estimate(frame, frame, (0, 1))
        c = RandomFlowEstimator(seed=2).estimate(frame, frame, (0, 1))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_bounded(self):
        flow = RandomFlowEstimator(magnitude=2.5).estimate(np.zeros((16, 16)), np.zeros((16, 16)), (3, 2))
        assert np.abs(flow).max() <= 2.5

    def test_negative_magnitude_fails_preparation(self):
        assert RandomFlowEstimator(magnitude=-1).prepare() is False


class TestCreateEstimator:

    @pytest.mark.parametrize("mode, kind", [
        ("estimate", BlockMatchingEstimator),
        ("zero", ZeroFlowEstimator),
        ("random", RandomFlowEstimator),
    ])
    def test_modes(self, mode, kind):
        assert isinstance(create_estimator(mode), kind)

    def test_file_mode(self, tmp_path):
        assert isinstance(create_estimator("file", str(tmp_path)), FloFileEstimator)
        with pytest.raises(EstimatorError):
            create_estimator("file")

    def test_unknown_mode(self):
        with pytest.raises(EstimatorError):
            create_estimator("raft")

    def test_random_mode_uses_seed(self):
        assert create_estimator("random", seed=7).seed == 7
