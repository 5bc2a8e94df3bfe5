import pytest
import torch

from crossview.model import CrossViewModel, ModelConfig, prepare_sample
from crossview.scene import GenConfig, generate_synthetic_scene

# Small scenes keep the forward passes cheap; the full-size defaults are
# exercised by the end-to-end suite.
SMALL_GEN = GenConfig(branches=2, max_neighbors=2, lane_vertex_spacing=4.0)
SMALL_MODEL = ModelConfig(candidate_radius=15.0, dense_radius=2.0)


@pytest.fixture(scope="session")
def gen_config():
    return SMALL_GEN


@pytest.fixture(scope="session")
def model_config():
    return SMALL_MODEL


@pytest.fixture(scope="session")
def sample(gen_config):
    return generate_synthetic_scene(0, gen_config)


@pytest.fixture(scope="session")
def samples(gen_config):
    return [generate_synthetic_scene(i, gen_config) for i in range(6)]


@pytest.fixture(scope="session")
def prepared(sample, model_config):
    return prepare_sample(sample, model_config)


@pytest.fixture()
def model(model_config):
    torch.manual_seed(0)
    return CrossViewModel(model_config)
