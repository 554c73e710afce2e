import os
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from config_manager import ConfigError
from flow_motion import estimate_flow
from synth_data import SceneObject, SceneSpec, generate, moving_box, object_list, write_scene


class TestGenerate:

    def test_deterministic(self, tiny_spec):
        first, second = generate(tiny_spec), generate(tiny_spec)
        np.testing.assert_array_equal(first.ir, second.ir)
        np.testing.assert_array_equal(first.vis, second.vis)
        assert first.flows.keys() == second.flows.keys()

    def test_seed_changes_texture(self, tiny_spec):
        other = replace(tiny_spec, seed=1)
        assert not np.array_equal(generate(tiny_spec).vis, generate(other).vis)

    def test_value_range_and_types(self, tiny_scene):
        for frames in (tiny_scene.ir, tiny_scene.vis):
            assert frames.shape == (3, 32, 32) and frames.dtype == np.float32
            assert frames.min() >= 0.0 and frames.max() <= 1.0
        assert tiny_scene.masks.dtype == bool

    def test_flow_pairs(self, tiny_scene):
        assert sorted(tiny_scene.flows) == [(0, 1), (1, 0), (1, 2), (2, 1)]

    def test_static_objects(self):
        spec = SceneSpec(height=32, width=32, frames=3, objects=(SceneObject("disk", 10, 8, 8, 0, 0, 0.9, 0.2),))
        scene = generate(spec)
        for flow in scene.flows.values():
            np.testing.assert_array_equal(flow, 0.0)
        assert not scene.masks.any()

    def test_rect_flow_footprint(self, tiny_scene):
        forward = tiny_scene.flows[(0, 1)]
        expected = np.zeros((32, 32, 2), dtype=np.float32)
        expected[8:16, 4:12] = (2.0, 0.0)
        np.testing.assert_array_equal(forward, expected)
        backward = tiny_scene.flows[(1, 0)]
        expected = np.zeros((32, 32, 2), dtype=np.float32)
        expected[8:16, 6:14] = (-2.0, 0.0)
        np.testing.assert_array_equal(backward, expected)

    def test_masks_follow_forward_flow(self):
        spec = SceneSpec()
        scene = generate(spec)
        for t in range(spec.frames - 1):
            moving = np.any(scene.flows[(t, t + 1)] != 0, axis=-1)
            np.testing.assert_array_equal(scene.masks[t], moving)

    def test_infrared_highlights_objects(self, tiny_scene):
        inside = tiny_scene.ir[0, 9:15, 5:11].mean()
        outside = tiny_scene.ir[0, 20:, 20:].mean()
        assert inside > outside + 0.5

    def test_visible_background_is_textured(self, tiny_scene):
        assert tiny_scene.vis[0, 20:, 20:].std() > tiny_scene.ir[0, 20:, 20:].std()


class TestSceneSpec:

    @pytest.mark.parametrize("obj", [SceneObject("rect", 40, 0, 0, 1, 0, 1, 1),
                                     SceneObject("star", 8, 0, 0, 1, 0, 1, 1),
                                     SceneObject("disk", 0, 0, 0, 1, 0, 1, 1)])
    def test_rejects_bad_objects(self, obj):
        with pytest.raises(ConfigError):
            SceneSpec(height=32, width=32, objects=(obj,)).validate()

    def test_rejects_empty_sequence(self):
        with pytest.raises(ConfigError):
            generate(SceneSpec(frames=0))

    def test_from_file(self, tmp_path):
        path = tmp_path / "scene.txt"
        path.write_text("seed = 5\nheight = 40\nwidth = 48\nframes = 4\nnoise_ir = 0\n"
                        "object = rect 8 2 3 1 0 0.9 0.2\n")
        spec = SceneSpec.from_file(str(path))
        assert (spec.seed, spec.height, spec.width, spec.frames) == (5, 40, 48, 4)
        assert isinstance(spec.height, int)
        assert spec.noise_ir == 0.0
        assert spec.objects == (SceneObject("rect", 8, 2, 3, 1, 0, 0.9, 0.2),)

    def test_from_file_keeps_default_objects(self, tmp_path):
        path = tmp_path / "scene.txt"
        path.write_text("frames = 4\n")
        assert SceneSpec.from_file(str(path)).objects == SceneSpec().objects

    def test_object_list(self, tiny_spec):
        assert object_list(tiny_spec) == ["rect 8 at (4, 8) v=(2, 0)"]


class TestWriteScene:

    def test_layout(self, tiny_scene, tmp_path):
        layout = write_scene(tiny_scene, str(tmp_path))
        assert set(layout) == {"ir", "vis", "flow", "mask"}
        for name in ("ir", "vis", "mask"):
            assert sorted(os.listdir(layout[name])) == ["0000.pgm", "0001.pgm", "0002.pgm"]
        assert sorted(os.listdir(layout["flow"])) == ["0000_0001.flo", "0001_0000.flo",
                                                      "0001_0002.flo", "0002_0001.flo"]

    def test_moving_box(self, tiny_scene):
        rows, cols = moving_box(tiny_scene.masks)
        assert (rows.start, rows.stop, cols.start, cols.stop) == (8, 16, 4, 16)

    def test_moving_box_without_motion(self):
        rows, cols = moving_box(np.zeros((2, 5, 7), dtype=bool))
        assert (rows.stop, cols.stop) == (5, 7)


@pytest.mark.slow
def test_estimator_recovers_object_motion():
    spec = SceneSpec()
    scene = generate(spec)
    flow = estimate_flow(scene.vis[0], scene.vis[1])
    footprint = ndimage.binary_erosion(scene.flows[(0, 1)][..., 0] == 2.0, iterations=4)
    assert footprint.any()
    assert abs(np.median(flow[footprint, 0]) - 2.0) <= 0.5
    assert abs(np.median(flow[footprint, 1])) <= 0.5
