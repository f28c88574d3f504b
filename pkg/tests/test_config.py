import pytest

from FACEflow.config import Config, DevelopmentConfig, ProductionConfig, RunConfig, base_config, resolve_output_dir
from FACEflow.modules.errors import InvalidConfigError
from FACEflow.modules.trainer import PairPolicy, Phase


def test_environment_selects_configuration(monkeypatch):
    monkeypatch.delenv('FACEFLOW_ENV', raising=False)
    assert base_config() is DevelopmentConfig
    monkeypatch.setenv('FACEFLOW_ENV', 'production')
    assert base_config() is ProductionConfig
    assert issubclass(ProductionConfig, Config)


def test_output_dir_override(monkeypatch, tmp_path):
    monkeypatch.delenv('FACEFLOW_OUTPUT_DIR', raising=False)
    assert resolve_output_dir('runs/a') == resolve_output_dir('runs/a', DevelopmentConfig)
    assert str(resolve_output_dir(None, DevelopmentConfig)) == str(DevelopmentConfig.OUTPUT_DIR)
    assert resolve_output_dir(None, DevelopmentConfig, 'benchmark') == DevelopmentConfig.OUTPUT_DIR / 'benchmark'
    monkeypatch.setenv('FACEFLOW_OUTPUT_DIR', str(tmp_path))
    assert resolve_output_dir('runs/a') == tmp_path / 'a'
    assert resolve_output_dir(None, default_name='synthetic') == tmp_path / 'synthetic'
    assert resolve_output_dir(None, default_name='benchmark') != resolve_output_dir(None, default_name='synthetic')


def test_defaults_follow_configuration_class():
    development = RunConfig.defaults(DevelopmentConfig)
    assert development.arch.output_resolution == 32
    assert development.arch.channel_cap == 64
    assert [spec.steps for spec in development.training.schedule.phases] == [200, 200, 100]
    canonical = RunConfig.defaults(Config)
    assert canonical.arch.output_resolution == 256
    assert canonical.losses.weights.lambda_sh == 0.5


def test_dict_round_trip(tiny_run_config):
    assert RunConfig.from_dict(tiny_run_config.to_dict(), DevelopmentConfig) == tiny_run_config


def test_yaml_round_trip(tiny_run_config, tmp_path):
    path = tmp_path / 'run.yaml'
    tiny_run_config.dump(str(path))
    assert RunConfig.load(str(path), DevelopmentConfig) == tiny_run_config


def test_phase_list():
    config = RunConfig.from_dict({'training': {'phases': [{'phase': 2, 'steps': 5},
                                                          {'phase': 3, 'steps': 4, 'learning_rate': 5e-5}]}},
                                 DevelopmentConfig)
    first, second = config.training.schedule.phases
    assert (first.phase, first.pair_policy, first.learning_rate) == (Phase.SELF, PairPolicy.SAME_IDENTITY, 2e-4)
    assert (second.phase, second.learning_rate, second.batch_size) == (Phase.CROSS, 5e-5, 8)


def test_direct_training():
    config = RunConfig.from_dict({'training': {'direct': {'steps': 30}}}, DevelopmentConfig)
    spec, = config.training.schedule.phases
    assert (spec.phase, spec.steps, spec.pair_policy) == (Phase.CROSS, 30, PairPolicy.HALF_CROSS)


@pytest.mark.parametrize('values', [
    {'colour': 'blue'},
    {'arch': {'output_resolution': '32'}},
    {'arch': {'sharing': 1}},
    {'arch': {'channel_cap': 0}},
    {'losses': {'lambda_pix': -2.0}},
    {'losses': {'lambda_tv': 1.0}},
    {'encoders': {'plugins': {'vocoder': 'standin'}}},
    {'training': {'phases': [{'phase': 3, 'steps': 1}, {'phase': 1, 'steps': 1}]}},
    {'training': {'phases': [{'phase': 4, 'steps': 1}]}},
    {'training': {'phases': [{'steps': 1}]}},
    {'training': {'direct': {'steps': 1}, 'phases': []}},
    {'dataset': {'num_ids': 0}},
])
def test_invalid_values_are_rejected(values):
    with pytest.raises(InvalidConfigError):
        RunConfig.from_dict(values, DevelopmentConfig)


def test_unreadable_file(tmp_path):
    path = tmp_path / 'broken.yaml'
    path.write_text('arch: [unclosed')
    with pytest.raises(InvalidConfigError):
        RunConfig.load(str(path))
