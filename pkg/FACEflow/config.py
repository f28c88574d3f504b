import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from FACEflow.modules.encoders import ROLES, EncoderSettings
from FACEflow.modules.errors import InvalidConfigError
from FACEflow.modules.losses import LossWeights
from FACEflow.modules.trainer import CurriculumSchedule, PhaseSpec


class Config:
    """Basic configuration"""
    # Get the project root
    PROJECT_ROOT = Path(__file__).parent.parent

    # Outputs
    OUTPUT_DIR = PROJECT_ROOT / 'runs'
    RESULTS_DB = 'results.db'

    # Generator and hypernetwork at the canonical scale
    OUTPUT_RESOLUTION = 256
    CHANNEL_CAP = 512
    SHARED_HIDDEN = 128
    SPECIFIC_HIDDEN = 256

    # Pose parameters
    EXPRESSION_DIM = 50
    SHAPE_DIM = 8

    # Training
    PHASE_STEPS = (2000, 2000, 1000)
    BATCH_SIZE = 16
    SEED = 0
    LOG_EVERY = 50

    # Synthetic dataset used when a run config names no dataset path
    SYNTHETIC_IDS = 10
    SYNTHETIC_FRAMES = 20
    SYNTHETIC_SEED = 7

    LOG_FORMAT = '%(levelname)-5.5s [%(name)s] %(message)s'


class DevelopmentConfig(Config):
    """Development configuration: desk-scale generator and short phases."""
    OUTPUT_RESOLUTION = 32
    CHANNEL_CAP = 64
    SHARED_HIDDEN = 32
    SPECIFIC_HIDDEN = 64
    PHASE_STEPS = (200, 200, 100)
    BATCH_SIZE = 8
    LOG_EVERY = 10


class ProductionConfig(Config):
    """Production configuration."""
    # In production, the output directory can be moved through the environment
    OUTPUT_DIR = Path(os.getenv('FACEFLOW_OUTPUT_DIR', Config.OUTPUT_DIR))


def base_config():
    """The configuration class selected by ``FACEFLOW_ENV``, development by default."""
    return ProductionConfig if os.getenv('FACEFLOW_ENV') == 'production' else DevelopmentConfig


def resolve_output_dir(path=None, config_object=None, default_name=None):
    """
    Resolves the output directory of a command.

    When ``FACEFLOW_OUTPUT_DIR`` is set it is the base directory of every command: the last part of
    ``path``, or ``default_name``, is placed under it. Otherwise ``path`` is used as given and the
    configuration's output directory (joined with ``default_name``) is the fallback.

    :param path: Output directory requested by the user.
    :param config_object: Configuration class; the one selected by ``FACEFLOW_ENV`` when omitted.
    :param default_name: Subdirectory of the command when no path is given.
    :rtype: pathlib.Path
    """
    base = os.getenv('FACEFLOW_OUTPUT_DIR')
    if base:
        name = Path(path).name if path else default_name
        return Path(base) / name if name else Path(base)
    if path:
        return Path(path)
    output_dir = Path((config_object or base_config()).OUTPUT_DIR)
    return output_dir / default_name if default_name else output_dir


@dataclass(frozen=True)
class ArchSettings:
    output_resolution: int = 32
    channel_cap: int = 64
    use_noise: bool = False
    mapping_layers: int = 8
    generator_seed: int = 0
    sharing: bool = True
    shared_hidden: int = 128
    specific_hidden: int = 256
    hypernet_seed: int = 1
    cross_conditioning: bool = False
    fusion_seed: int = 2


@dataclass(frozen=True)
class DatasetSettings:
    path: str = None
    num_ids: int = 10
    frames_per_id: int = 20
    seed: int = 7
    calibrate_pose: bool = True


@dataclass(frozen=True)
class LossSettings:
    weights: LossWeights = field(default_factory=LossWeights)
    cross_gaze: bool = False

    def to_dict(self):
        return {**asdict(self.weights), 'cross_gaze': self.cross_gaze}


@dataclass(frozen=True)
class TrainingSettings:
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    reset_optimizer: bool = False
    log_every: int = 50
    checkpoint_every: int = 0

    def to_dict(self):
        return {**self.schedule.to_dict(), 'reset_optimizer': self.reset_optimizer,
                'log_every': self.log_every, 'checkpoint_every': self.checkpoint_every}


_SCALAR_TYPES = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _check_keys(section, values, allowed):
    if not isinstance(values, dict):
        raise InvalidConfigError(f'Section "{section}" must be a mapping, got {type(values).__name__}')
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise InvalidConfigError(f'Unknown keys in section "{section}": {unknown}')


def _check_scalar(section, key, value, kind, optional=False):
    if value is None and optional:
        return value
    if isinstance(value, bool) and kind is not bool or not isinstance(value, _SCALAR_TYPES[kind]):
        raise InvalidConfigError(f'"{section}.{key}" must be of type {kind.__name__}, got {value!r}')
    return kind(value)


def _scalar_section(cls, section, values, defaults, optional=()):
    _check_keys(section, values, [f.name for f in fields(cls)])
    merged = {**asdict(defaults), **values}
    return cls(**{f.name: _check_scalar(section, f.name, merged[f.name], f.type, f.name in optional)
                  for f in fields(cls)})


def _encoder_section(values, resolution, defaults):
    allowed = [f.name for f in fields(EncoderSettings) if f.name != 'resolution']
    _check_keys('encoders', values, allowed)
    settings = {}
    for name in ('expression_dim', 'shape_dim', 'identity_dim'):
        settings[name] = _check_scalar('encoders', name, values.get(name, getattr(defaults, name)), int)
    settings['normalize_pose_input'] = _check_scalar('encoders', 'normalize_pose_input',
                                                     values.get('normalize_pose_input', defaults.normalize_pose_input),
                                                     bool)
    settings['latent_clamp'] = _check_scalar('encoders', 'latent_clamp',
                                             values.get('latent_clamp', defaults.latent_clamp), float)
    seeds = values.get('seeds', {})
    _check_keys('encoders.seeds', seeds, defaults.seeds)
    settings['seeds'] = {role: _check_scalar('encoders.seeds', role, seeds.get(role, seed), int)
                         for role, seed in defaults.seeds.items()}
    plugins = values.get('plugins', {})
    _check_keys('encoders.plugins', plugins, ROLES)
    settings['plugins'] = {role: _check_scalar('encoders.plugins', role, plugins.get(role, 'standin'), str)
                           for role in ROLES}
    if min(settings['expression_dim'], settings['shape_dim'], settings['identity_dim']) < 1:
        raise InvalidConfigError('Encoder dimensions must be positive')
    return EncoderSettings(resolution=resolution, **settings)


def _training_section(values, defaults):
    _check_keys('training', values, ['phases', 'direct', 'reset_optimizer', 'log_every', 'checkpoint_every'])
    if 'phases' in values and 'direct' in values:
        raise InvalidConfigError('"training.phases" and "training.direct" are mutually exclusive')
    if 'direct' in values:
        direct = values['direct']
        _check_keys('training.direct', direct, ['steps', 'batch_size', 'learning_rate'])
        schedule = CurriculumSchedule.direct(
            _check_scalar('training.direct', 'steps', direct.get('steps', sum(defaults.PHASE_STEPS)), int),
            _check_scalar('training.direct', 'batch_size', direct.get('batch_size', defaults.BATCH_SIZE), int),
            _check_scalar('training.direct', 'learning_rate', direct.get('learning_rate', 2e-4), float))
    elif 'phases' in values:
        if not isinstance(values['phases'], list):
            raise InvalidConfigError('"training.phases" must be a list')
        specs = []
        for position, spec in enumerate(values['phases']):
            section = f'training.phases[{position}]'
            _check_keys(section, spec, [f.name for f in fields(PhaseSpec)])
            if 'phase' not in spec or 'steps' not in spec:
                raise InvalidConfigError(f'"{section}" needs "phase" and "steps"')
            try:
                specs.append(PhaseSpec(
                    phase=_check_scalar(section, 'phase', spec['phase'], int),
                    steps=_check_scalar(section, 'steps', spec['steps'], int),
                    learning_rate=_check_scalar(section, 'learning_rate', spec.get('learning_rate'), float, True),
                    batch_size=_check_scalar(section, 'batch_size', spec.get('batch_size', defaults.BATCH_SIZE), int),
                    pair_policy=_check_scalar(section, 'pair_policy', spec.get('pair_policy'), str, True)))
            except ValueError as e:
                raise InvalidConfigError(f'Invalid "{section}": {e}') from e
        schedule = CurriculumSchedule(tuple(specs))
    else:
        schedule = CurriculumSchedule.default(defaults.PHASE_STEPS, defaults.BATCH_SIZE)
    return TrainingSettings(
        schedule=schedule,
        reset_optimizer=_check_scalar('training', 'reset_optimizer', values.get('reset_optimizer', False), bool),
        log_every=_check_scalar('training', 'log_every', values.get('log_every', defaults.LOG_EVERY), int),
        checkpoint_every=_check_scalar('training', 'checkpoint_every', values.get('checkpoint_every', 0), int))


@dataclass(frozen=True)
class RunConfig:
    """
    Everything a run is built from. Loaded from YAML, validated against closed key sets and
    embedded as a plain dict in every checkpoint, so a model can be rebuilt from a checkpoint alone.
    """
    name: str = 'run'
    seed: int = 0
    output_dir: str = None
    arch: ArchSettings = field(default_factory=ArchSettings)
    encoders: EncoderSettings = field(default_factory=EncoderSettings)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    losses: LossSettings = field(default_factory=LossSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)

    SECTIONS = ('name', 'seed', 'output_dir', 'arch', 'encoders', 'dataset', 'losses', 'training')

    @classmethod
    def defaults(cls, config_object=None):
        config_object = config_object or base_config()
        arch = ArchSettings(output_resolution=config_object.OUTPUT_RESOLUTION, channel_cap=config_object.CHANNEL_CAP,
                            shared_hidden=config_object.SHARED_HIDDEN, specific_hidden=config_object.SPECIFIC_HIDDEN)
        return cls(
            seed=config_object.SEED,
            arch=arch,
            encoders=EncoderSettings(resolution=arch.output_resolution, expression_dim=config_object.EXPRESSION_DIM,
                                     shape_dim=config_object.SHAPE_DIM),
            dataset=DatasetSettings(num_ids=config_object.SYNTHETIC_IDS, frames_per_id=config_object.SYNTHETIC_FRAMES,
                                    seed=config_object.SYNTHETIC_SEED),
            training=TrainingSettings(CurriculumSchedule.default(config_object.PHASE_STEPS, config_object.BATCH_SIZE),
                                      log_every=config_object.LOG_EVERY),
        )

    @classmethod
    def from_dict(cls, values, config_object=None):
        """
        Builds a run config from a plain dict, filling missing keys from the configuration class.

        :raises InvalidConfigError: On unknown keys, wrong types or out-of-range values.
        """
        config_object = config_object or base_config()
        defaults = cls.defaults(config_object)
        values = values or {}
        _check_keys('run config', values, cls.SECTIONS)

        arch = _scalar_section(ArchSettings, 'arch', values.get('arch', {}), defaults.arch)
        if min(arch.channel_cap, arch.shared_hidden, arch.specific_hidden, arch.mapping_layers) < 1:
            raise InvalidConfigError('Channel cap, hidden widths and mapping layers must be positive')
        dataset = _scalar_section(DatasetSettings, 'dataset', values.get('dataset', {}), defaults.dataset,
                                  optional=('path',))
        if min(dataset.num_ids, dataset.frames_per_id) < 1:
            raise InvalidConfigError('Synthetic datasets need positive identity and frame counts')

        loss_values = values.get('losses', {})
        _check_keys('losses', loss_values, [f.name for f in fields(LossWeights)] + ['cross_gaze'])
        weights = LossWeights(**{f.name: _check_scalar('losses', f.name, loss_values.get(f.name, f.default), float)
                                 for f in fields(LossWeights)})
        losses = LossSettings(weights, _check_scalar('losses', 'cross_gaze', loss_values.get('cross_gaze', False), bool))

        return cls(
            name=_check_scalar('run config', 'name', values.get('name', defaults.name), str),
            seed=_check_scalar('run config', 'seed', values.get('seed', defaults.seed), int),
            output_dir=_check_scalar('run config', 'output_dir', values.get('output_dir'), str, True),
            arch=arch,
            encoders=_encoder_section(values.get('encoders', {}), arch.output_resolution, defaults.encoders),
            dataset=dataset,
            losses=losses,
            training=_training_section(values.get('training', {}), config_object),
        )

    @classmethod
    def load(cls, path, config_object=None):
        """
        Reads a YAML run config.

        :raises InvalidConfigError: If the file cannot be read or parsed, or fails validation.
        """
        try:
            with open(path, 'r') as file_handle:
                values = yaml.safe_load(file_handle)
        except (OSError, yaml.YAMLError) as e:
            raise InvalidConfigError(f'Failed to read run config {path}: {e}') from e
        return cls.from_dict(values, config_object)

    def to_dict(self):
        encoders = asdict(self.encoders)
        encoders.pop('resolution')
        return {
            'name': self.name,
            'seed': self.seed,
            'output_dir': self.output_dir,
            'arch': asdict(self.arch),
            'encoders': encoders,
            'dataset': asdict(self.dataset),
            'losses': self.losses.to_dict(),
            'training': self.training.to_dict(),
        }

    def dump(self, path):
        with open(path, 'w') as file_handle:
            yaml.safe_dump(self.to_dict(), file_handle, sort_keys=False)

    def with_output_dir(self, output_dir):
        return replace(self, output_dir=str(output_dir))
