import numpy as np
import pytest
import torch

from scenepose.config.settings import AugmentationConfig
from scenepose.models.loss import MultiSceneLoss
from scenepose.models.pose_regressor import MultiScenePoseRegressor
from scenepose.services.checkpoint_service import CheckpointError, load_checkpoint, save_checkpoint
from scenepose.services.clustering_service import write_centroid_file
from scenepose.services.evaluation_service import EvaluationService


@pytest.fixture()
def trained_state(tiny_model_config, tiny_centroids):
    """Model with centroids loaded and non-default loss balance terms"""
    torch.manual_seed(2)
    model = MultiScenePoseRegressor(tiny_model_config)
    model.set_centroids(tiny_centroids)
    return model, MultiSceneLoss(0.25, -2.5)


def test_round_trip(tmp_path, trained_state, tiny_centroids):
    model, loss = trained_state
    centroid_path = tmp_path / 'centroids.txt'
    digest = write_centroid_file(centroid_path, tiny_centroids)
    path = save_checkpoint(tmp_path / 'ckpt' / 'model.pt', model, loss, tiny_centroids, digest, epoch=7)

    loaded = load_checkpoint(path, centroid_path)
    assert loaded.epoch == 7
    assert loaded.centroid_hash == digest
    assert loaded.model.config == model.config
    for name, value in model.state_dict().items():
        assert torch.equal(loaded.model.state_dict()[name], value)
    assert float(loaded.loss.s_x) == pytest.approx(0.25)
    assert float(loaded.loss.s_q) == pytest.approx(-2.5)
    for scene_id, centroid_set in tiny_centroids.items():
        assert np.array_equal(loaded.centroid_sets[scene_id].position_centroids, centroid_set.position_centroids)
        assert np.array_equal(loaded.centroid_sets[scene_id].orientation_centroids,
                              centroid_set.orientation_centroids)


def test_round_trip_gives_identical_evaluation(tmp_path, trained_state, tiny_centroids, tiny_dataset):
    model, loss = trained_state
    path = save_checkpoint(tmp_path / 'model.pt', model, loss, tiny_centroids)
    loaded = load_checkpoint(path)
    service = EvaluationService(AugmentationConfig(resize=16, crop_size=16), batch_size=4)
    before = service.evaluate(model, tiny_dataset.samples, tiny_centroids)
    after = service.evaluate(loaded.model, tiny_dataset.samples, loaded.centroid_sets)
    assert before.to_dict() == after.to_dict()


def test_centroid_hash_mismatch(tmp_path, trained_state, tiny_centroids):
    model, loss = trained_state
    path = save_checkpoint(tmp_path / 'model.pt', model, loss, tiny_centroids, centroid_hash='0' * 64)
    centroid_path = tmp_path / 'centroids.txt'
    write_centroid_file(centroid_path, tiny_centroids)
    with pytest.raises(CheckpointError, match='does not match'):
        load_checkpoint(path, centroid_path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'nope.pt')


def test_unsupported_version(tmp_path):
    path = tmp_path / 'old.pt'
    torch.save({'format_version': 99}, path)
    with pytest.raises(CheckpointError, match='version'):
        load_checkpoint(path)
