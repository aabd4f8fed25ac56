import math
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from scenepose.services.synthetic_service import (SceneTexture, box_diagonal, generate_synthetic, render_view,
                                                  scene_name, scene_position_box, yaw_pitch_quaternion)


@pytest.fixture()
def small_synthetic(tmp_path):
    """3 scenes x 8 samples at 16x16"""
    return generate_synthetic(3, 8, 16, seed=1, out_dir=tmp_path / 'synth')


def test_generate_counts_and_splits(small_synthetic):
    assert len(small_synthetic) == 24
    assert small_synthetic.num_scenes == 3
    assert small_synthetic.scenes[2] == ('synthetic', 'scene002')
    test = small_synthetic.split('test')
    assert len(test) == 6
    assert sorted({s.scene_id for s in test.samples}) == [0, 1, 2]


def test_poses_lie_in_scene_boxes(small_synthetic):
    for sample in small_synthetic.samples:
        low, high = scene_position_box(sample.scene_id)
        position = np.array(sample.pose.position)
        assert np.all(position >= low - 1e-9) and np.all(position <= high + 1e-9)
        assert sample.pose.orientation.norm() == pytest.approx(1.0, abs=1e-9)


def test_images_written(small_synthetic, tmp_path):
    with Image.open(small_synthetic.samples[0].image_path) as image:
        assert image.size == (16, 16)
        assert image.mode == 'RGB'
    assert (tmp_path / 'synth' / 'scene_map.txt').exists()


def test_same_seed_gives_identical_bytes(tmp_path):
    first = generate_synthetic(2, 4, 12, seed=3, out_dir=tmp_path / 'a')
    generate_synthetic(2, 4, 12, seed=3, out_dir=tmp_path / 'b')
    assert (tmp_path / 'a' / 'manifest.txt').read_bytes() == (tmp_path / 'b' / 'manifest.txt').read_bytes()
    for sample in first.samples:
        relative = sample.image_path[len(str(tmp_path / 'a')):]
        assert Path(sample.image_path).read_bytes() == Path(str(tmp_path / 'b') + relative).read_bytes()


def test_different_seed_changes_dataset(tmp_path):
    generate_synthetic(1, 4, 12, seed=3, out_dir=tmp_path / 'a')
    generate_synthetic(1, 4, 12, seed=4, out_dir=tmp_path / 'b')
    assert (tmp_path / 'a' / 'manifest.txt').read_text() != (tmp_path / 'b' / 'manifest.txt').read_text()


def test_scene_boxes_are_disjoint():
    boxes = [scene_position_box(s) for s in range(4)]
    for (_, high), (low, _) in zip(boxes, boxes[1:]):
        assert high[0] < low[0]
    assert box_diagonal() == pytest.approx(3.0)
    assert scene_name(7) == 'scene007'


def test_yaw_pitch_quaternion():
    assert np.allclose(yaw_pitch_quaternion(0.0, 0.0), [1, 0, 0, 0])
    half = math.sqrt(0.5)
    assert np.allclose(yaw_pitch_quaternion(90.0, 0.0), [half, 0, 0, half])
    assert np.allclose(yaw_pitch_quaternion(0.0, 90.0), [half, half, 0, 0])


def test_textures_differ_between_scenes():
    first = render_view(SceneTexture(0, 0), np.array([1.0, 1.0, 0.5]), 0.0, 10.0, 16)
    second = render_view(SceneTexture(1, 0), np.array([1.0, 1.0, 0.5]), 0.0, 10.0, 16)
    assert first.shape == (16, 16, 3) and first.dtype == np.uint8
    assert not np.array_equal(first, second)


def test_rejects_bad_arguments(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic(0, 4, 16, seed=0, out_dir=tmp_path)
    with pytest.raises(ValueError):
        generate_synthetic(1, 4, 16, seed=0, out_dir=tmp_path, test_fraction=1.0)
