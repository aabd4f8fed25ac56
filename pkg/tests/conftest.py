import pytest


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running acceptance tests (deselect with -m "not slow")')


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    """Keep default run outputs inside the test's temp dir."""
    monkeypatch.setenv('SCENEPOSE_OUTPUT_ROOT', str(tmp_path / 'runs'))
    monkeypatch.setenv('SCENEPOSE_DEVICE', 'cpu')
    return tmp_path / 'runs'


@pytest.fixture()
def tiny_dataset(tmp_path):
    """Two synthetic scenes of 8 views at 16x16, 6 train and 2 test per scene"""
    from scenepose.services.synthetic_service import generate_synthetic
    return generate_synthetic(2, 8, 16, seed=0, out_dir=tmp_path / 'synthetic')


@pytest.fixture()
def tiny_model_config():
    """Reference-backbone model sized for the tiny dataset"""
    from scenepose.config.settings import ModelConfig, reference_backbone_spec
    return ModelConfig(num_scenes=2, token_dim=8, num_layers=1, num_heads=2, mlp_hidden_dim=16, dropout=0.0,
                       num_position_clusters=2, num_orientation_clusters=2, head_hidden_dim=16,
                       backbone=reference_backbone_spec(16))


@pytest.fixture()
def tiny_centroids(tiny_dataset):
    from scenepose.services.clustering_service import build_centroid_sets
    return build_centroid_sets(tiny_dataset.split('train').samples, 2, 2, seed=0)
