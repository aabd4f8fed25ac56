import math
from dataclasses import replace

import pytest
import torch

from scenepose.config.settings import ConfigError, ModelConfig, reference_backbone_spec
from scenepose.models.pose_regressor import (CentroidClassifier, MultiScenePoseRegressor, SelectionError,
                                             count_parameters, select_index, trainable_parameter_count)
from scenepose.services.clustering_service import CentroidSet


@pytest.fixture()
def small_config():
    """Small reference-backbone model, 32x32 inputs"""
    return ModelConfig(num_scenes=3, token_dim=16, num_layers=1, num_heads=2, mlp_hidden_dim=32, dropout=0.0,
                       num_position_clusters=2, num_orientation_clusters=3, head_hidden_dim=32,
                       backbone=reference_backbone_spec(32))


@pytest.fixture()
def model(small_config):
    torch.manual_seed(0)
    return MultiScenePoseRegressor(small_config).eval()


def _centroid_sets(config, first_position=(1.0, 2.0, 3.0)):
    sets = {}
    for scene_id in range(config.num_scenes):
        positions = [[10.0 * scene_id + k, 0.0, 0.0] for k in range(config.num_position_clusters)]
        if scene_id == 0:
            positions[0] = list(first_position)
        orientations = [[1.0, 0.0, 0.0, 0.0]] * config.num_orientation_clusters
        sets[scene_id] = CentroidSet(scene_id, positions, orientations)
    return sets


def _zero_residual_heads(model, position_bias=(0.0, 0.0, 0.0)):
    with torch.no_grad():
        model.position_residual.fc2.weight.zero_()
        model.position_residual.fc2.bias.copy_(torch.tensor(position_bias))
        model.orientation_residual.fc2.weight.zero_()
        model.orientation_residual.fc2.bias.zero_()


def test_select_index_examples():
    log_probs = torch.tensor([[-1.0, -0.5, -2.0]])
    assert select_index(log_probs).tolist() == [1]
    assert select_index(log_probs, torch.tensor([2])).tolist() == [2]
    assert select_index(torch.tensor([[-0.7, -0.7, -3.0]])).tolist() == [0]


def test_select_index_rejects_out_of_range():
    with pytest.raises(SelectionError):
        select_index(torch.zeros(1, 3), torch.tensor([3]))
    with pytest.raises(SelectionError):
        select_index(torch.zeros(2, 3), torch.tensor([0, 1, 2]))


def test_forward_shapes(model, small_config):
    model.set_centroids(_centroid_sets(small_config))
    with torch.no_grad():
        output = model(torch.rand(2, 3, 32, 32))
    assert output.scene_log_probs.shape == (2, 3)
    assert output.position_embeddings.shape == (2, 3, 16)
    assert output.orientation_embeddings.shape == (2, 3, 16)
    assert output.fused_embeddings.shape == (2, 3, 32)
    assert output.position_centroid_log_probs.shape == (2, 2)
    assert output.orientation_centroid_log_probs.shape == (2, 3)
    assert output.position.shape == (2, 3)
    assert output.orientation.shape == (2, 4)
    assert torch.allclose(output.scene_log_probs.exp().sum(-1), torch.ones(2), atol=1e-6)
    assert torch.allclose(output.orientation_normalized.norm(dim=-1), torch.ones(2), atol=1e-6)


def test_forward_random_configs():
    for seed in range(4):
        torch.manual_seed(seed)
        n = seed + 1
        config = ModelConfig(num_scenes=n, token_dim=8 * (seed % 2 + 1), num_layers=seed % 3, num_heads=2,
                             mlp_hidden_dim=16, dropout=0.0, num_position_clusters=1 + seed % 2,
                             num_orientation_clusters=2, head_hidden_dim=16, backbone=reference_backbone_spec(16))
        output = MultiScenePoseRegressor(config).eval()(torch.rand(1, 3, 16, 16))
        assert output.scene_log_probs.shape == (1, n)
        assert output.position_centroid_log_probs.shape == (1, config.num_position_clusters)
        assert 0 <= int(output.selected_scene) < n


def test_selected_scene_is_argmax_without_forcing(model):
    with torch.no_grad():
        output = model(torch.rand(4, 3, 32, 32))
    assert torch.equal(output.selected_scene, output.scene_log_probs.argmax(-1))


def test_zero_residuals_return_forced_centroid(model, small_config):
    model.set_centroids(_centroid_sets(small_config))
    _zero_residual_heads(model)
    with torch.no_grad():
        output = model(torch.rand(1, 3, 32, 32), scene_index=torch.tensor([0]),
                       position_label=torch.tensor([0]), orientation_label=torch.tensor([0]))
    assert output.position[0].tolist() == [1.0, 2.0, 3.0]
    assert output.orientation[0].tolist() == [1.0, 0.0, 0.0, 0.0]


def test_residual_added_to_centroid(model, small_config):
    model.set_centroids(_centroid_sets(small_config))
    _zero_residual_heads(model, position_bias=(0.1, -0.2, 0.0))
    with torch.no_grad():
        output = model(torch.rand(1, 3, 32, 32), scene_index=torch.tensor([0]), position_label=torch.tensor([0]))
    assert torch.allclose(output.position[0], torch.tensor([1.1, 1.8, 3.0]))


def test_centroid_only_inference_skips_residuals(model, small_config):
    model.set_centroids(_centroid_sets(small_config))
    with torch.no_grad():
        output = model(torch.rand(1, 3, 32, 32), scene_index=torch.tensor([0]),
                       position_label=torch.tensor([0]), use_residuals=False)
    assert torch.count_nonzero(output.delta_position) == 0
    assert output.position[0].tolist() == [1.0, 2.0, 3.0]


def test_single_scene_log_prob_is_zero(small_config):
    torch.manual_seed(1)
    model = MultiScenePoseRegressor(replace(small_config, num_scenes=1)).eval()
    with torch.no_grad():
        output = model(torch.rand(2, 3, 32, 32))
    assert torch.allclose(output.scene_log_probs, torch.zeros(2, 1))
    assert output.selected_scene.tolist() == [0, 0]


def test_single_position_cluster_log_prob_is_zero(small_config):
    model = MultiScenePoseRegressor(replace(small_config, num_position_clusters=1)).eval()
    with torch.no_grad():
        output = model(torch.rand(1, 3, 32, 32))
    assert torch.allclose(output.position_centroid_log_probs, torch.zeros(1, 1))


def test_identical_queries_give_uniform_scene_posterior(model):
    with torch.no_grad():
        model.position_queries.copy_(model.position_queries[:1].expand(3, -1))
        model.orientation_queries.copy_(model.orientation_queries[:1].expand(3, -1))
        output = model(torch.rand(1, 3, 32, 32))
    assert torch.allclose(output.scene_log_probs, torch.full((1, 3), -math.log(3)), atol=1e-5)


def test_centroid_classifier_rejects_unknown_scene():
    classifier = CentroidClassifier(2, 8, 4)
    with pytest.raises(SelectionError):
        classifier(torch.rand(1, 8), torch.tensor([2]))


def test_forward_deterministic_in_eval(model):
    images = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        first, second = model(images), model(images)
    assert torch.equal(first.position, second.position)
    assert torch.equal(first.scene_log_probs, second.scene_log_probs)


def test_return_attention(model):
    with torch.no_grad():
        output = model(torch.rand(1, 3, 32, 32), return_attention=True)
    attention = output.attention
    assert attention.position_grid == (2, 2)
    assert attention.orientation_grid == (4, 4)
    assert attention.position_decoder_cross[-1].shape == (1, 3, 4)
    assert attention.orientation_encoder[-1].shape == (1, 16, 16)


def test_set_centroids_validation(model, small_config):
    sets = _centroid_sets(small_config)
    with pytest.raises(ConfigError):
        model.set_centroids({k: v for k, v in sets.items() if k != 2})
    sets[1] = CentroidSet(1, [[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0, 0.0]] * 3)
    with pytest.raises(ConfigError):
        model.set_centroids(sets)


@pytest.mark.parametrize('shared', [False, True])
def test_count_parameters_matches_module(small_config, shared):
    config = replace(small_config, shared_centroid_heads=shared)
    assert count_parameters(config) == trainable_parameter_count(MultiScenePoseRegressor(config))


def test_count_parameters_needs_backbone_count_for_efficientnet():
    with pytest.raises(ConfigError):
        count_parameters(ModelConfig())


def test_per_scene_growth_with_shared_heads():
    config = ModelConfig(token_dim=256, num_layers=6, shared_centroid_heads=True,
                         backbone=reference_backbone_spec(224))
    small = count_parameters(replace(config, num_scenes=4))
    large = count_parameters(replace(config, num_scenes=1000))
    assert large - small == 2 * 996 * 256
    assert (large - small) / small < 0.05
