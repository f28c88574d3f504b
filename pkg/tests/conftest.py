import pytest
import torch

from FACEflow.app import build_reenactor, load_dataset, prepare_pose_oracle
from FACEflow.config import DevelopmentConfig, RunConfig
from FACEflow.modules.generator import Generator, scaled_arch

TINY_RUN = {
    'name': 'tiny',
    'seed': 3,
    'arch': {'output_resolution': 8, 'channel_cap': 4, 'mapping_layers': 2, 'shared_hidden': 8, 'specific_hidden': 8},
    'encoders': {'expression_dim': 4, 'shape_dim': 2},
    'dataset': {'num_ids': 3, 'frames_per_id': 4, 'seed': 5},
    'training': {'phases': [{'phase': 1, 'steps': 2, 'batch_size': 2},
                            {'phase': 2, 'steps': 2, 'batch_size': 2},
                            {'phase': 3, 'steps': 2, 'batch_size': 2}],
                 'log_every': 1},
}

DESK_RUN = {
    'name': 'desk',
    'arch': {'output_resolution': 32, 'channel_cap': 64, 'mapping_layers': 2, 'shared_hidden': 16,
             'specific_hidden': 16},
    'dataset': {'num_ids': 4, 'frames_per_id': 6, 'seed': 7},
}


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running training checks')


@pytest.fixture
def tiny_arch():
    return scaled_arch(8, 4)


@pytest.fixture
def desk_arch():
    return scaled_arch(32, 64)


@pytest.fixture
def tiny_generator(tiny_arch):
    return Generator(tiny_arch, mapping_layers=2)


@pytest.fixture
def tiny_run_config():
    return RunConfig.from_dict(TINY_RUN, DevelopmentConfig)


@pytest.fixture
def desk_run_config():
    return RunConfig.from_dict(DESK_RUN, DevelopmentConfig)


@pytest.fixture
def tiny_dataset(tiny_run_config):
    return load_dataset(tiny_run_config)


@pytest.fixture
def tiny_reenactor(tiny_run_config, tiny_dataset):
    torch.manual_seed(0)
    model = build_reenactor(tiny_run_config)
    prepare_pose_oracle(model, tiny_dataset)
    return model
