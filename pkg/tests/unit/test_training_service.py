import math
from dataclasses import replace

import pytest
import torch

from scenepose.config.settings import AugmentationConfig, ConfigError, TrainConfig
from scenepose.models.pose_regressor import MultiScenePoseRegressor
from scenepose.services.checkpoint_service import load_checkpoint
from scenepose.services.training_service import LOG_COLUMNS, TrainingService, format_log_row


@pytest.fixture()
def train_config():
    """One optimizer step per epoch over the 12 tiny train samples"""
    return TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3, lr_halving_interval=1, seed=0,
                       num_position_clusters=2, num_orientation_clusters=2, device='cpu')


@pytest.fixture()
def augmentation():
    return AugmentationConfig(resize=16, crop_size=16, brightness=0.0, contrast=0.0, saturation=0.0)


def _model(config):
    torch.manual_seed(0)
    return MultiScenePoseRegressor(config)


def test_zero_epochs_saves_initial_state(tmp_path, tiny_dataset, tiny_model_config, tiny_centroids,
                                         train_config, augmentation):
    model = _model(tiny_model_config)
    initial = {k: v.clone() for k, v in model.state_dict().items()}
    service = TrainingService(replace(train_config, epochs=0), augmentation)
    result = service.train(model, tiny_dataset.split('train').samples, tiny_centroids, tmp_path / 'out')
    assert result.history == []
    loaded = load_checkpoint(result.checkpoint_path)
    for name, value in loaded.model.state_dict().items():
        if name in ('position_centroids', 'orientation_centroids'):
            continue
        assert torch.equal(value, initial[name]), name
    assert loaded.epoch == 0


def test_learning_rate_halves_each_interval(tmp_path, tiny_dataset, tiny_model_config, tiny_centroids,
                                            train_config, augmentation):
    service = TrainingService(replace(train_config, epochs=3), augmentation)
    result = service.train(_model(tiny_model_config), tiny_dataset.split('train').samples, tiny_centroids,
                           tmp_path / 'out')
    assert [row['lr'] for row in result.history] == pytest.approx([1e-3, 5e-4, 2.5e-4])
    assert [row['step'] for row in result.history] == [0, 1, 2]


def test_first_step_loss_near_uniform_baseline(tmp_path, tiny_dataset, tiny_model_config, tiny_centroids,
                                               train_config, augmentation):
    service = TrainingService(replace(train_config, epochs=1), augmentation)
    row = service.train(_model(tiny_model_config), tiny_dataset.split('train').samples, tiny_centroids,
                        tmp_path / 'out').history[0]
    s_x, s_q = train_config.init_s_x, train_config.init_s_q
    pose = row['L_x'] * math.exp(-s_x) + s_x + row['L_q'] * math.exp(-s_q) + s_q
    baseline = math.log(2) + math.log(2) + math.log(2) + pose
    assert row['total'] == pytest.approx(baseline, rel=0.2)
    assert row['s_x'] == pytest.approx(s_x)


def test_log_and_checkpoints_written(tmp_path, tiny_dataset, tiny_model_config, tiny_centroids,
                                     train_config, augmentation):
    service = TrainingService(replace(train_config, checkpoint_interval=1), augmentation)
    result = service.train(_model(tiny_model_config), tiny_dataset.split('train').samples, tiny_centroids,
                           tmp_path / 'out', centroid_hash='abc')
    lines = result.log_path.read_text().splitlines()
    assert lines[0].split() == list(LOG_COLUMNS)
    assert len(lines) == 1 + len(result.history)
    assert lines[1] == format_log_row(result.history[0])
    assert (tmp_path / 'out' / 'checkpoint_epoch0001.pt').exists()
    assert (tmp_path / 'out' / 'checkpoint_epoch0002.pt').exists()
    loaded = load_checkpoint(result.checkpoint_path)
    assert loaded.epoch == 2
    assert loaded.centroid_hash == 'abc'
    assert loaded.optimizer_state is not None


def test_training_is_seeded(tmp_path, tiny_dataset, tiny_model_config, tiny_centroids, train_config, augmentation):
    samples = tiny_dataset.split('train').samples
    first = TrainingService(train_config, augmentation).train(_model(tiny_model_config), samples,
                                                              tiny_centroids, tmp_path / 'a')
    second = TrainingService(train_config, augmentation).train(_model(tiny_model_config), samples,
                                                               tiny_centroids, tmp_path / 'b')
    assert [row['total'] for row in first.history] == [row['total'] for row in second.history]


@pytest.mark.parametrize('change, message', [
    ({'crop_size': 12, 'resize': 16}, 'crop_size'),
    ({'num_position_clusters': 3}, 'K_x'),
    ({'num_scenes': 1}, 'scene id'),
    ({'empty': True}, 'empty'),
])
def test_mismatches_fail_before_first_step(tmp_path, tiny_dataset, tiny_model_config, tiny_centroids,
                                           train_config, augmentation, change, message):
    samples = tiny_dataset.split('train').samples
    model_config = tiny_model_config
    if 'crop_size' in change:
        augmentation = replace(augmentation, crop_size=change['crop_size'], resize=change['resize'])
    if 'num_position_clusters' in change:
        train_config = replace(train_config, num_position_clusters=change['num_position_clusters'])
    if 'num_scenes' in change:
        model_config = replace(model_config, num_scenes=change['num_scenes'])
    if 'empty' in change:
        samples = []
    with pytest.raises(ConfigError, match=message):
        TrainingService(train_config, augmentation).train(_model(model_config), samples, tiny_centroids,
                                                          tmp_path / 'out')
    assert not (tmp_path / 'out' / 'train_log.txt').exists()


def test_smoothed_loss_non_increasing(tmp_path, tiny_dataset, tiny_model_config, tiny_centroids,
                                      train_config, augmentation):
    # one full batch per epoch, no jitter: the only randomness left is the model init
    service = TrainingService(replace(train_config, epochs=60, lr_halving_interval=1000), augmentation)
    history = service.train(_model(tiny_model_config), tiny_dataset.split('train').samples, tiny_centroids,
                            tmp_path / 'out').history
    totals = [row['total'] for row in history]
    windows = [sum(totals[i:i + 20]) / 20 for i in range(0, len(totals), 20)]
    assert len(windows) == 3
    assert windows[0] >= windows[1] >= windows[2]
