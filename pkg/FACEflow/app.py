"""
This module initializes and configures FACEflow runs.

It defines a factory function that builds a run from a run config: the dataset, the reenactment
model and the training entry points the command line calls.
"""
import logging
import os

import torch

from FACEflow.config import RunConfig, base_config
from FACEflow.modules.checkpoint import load_checkpoint, restore_model
from FACEflow.modules.dataset import generate_synthetic_dataset, ingest
from FACEflow.modules.encoders import PoseParamExtractor, PoseParams, build_encoder_suite
from FACEflow.modules.errors import InvalidConfigError
from FACEflow.modules.fusion import ReenactmentModule
from FACEflow.modules.generator import Generator, scaled_arch, seeded
from FACEflow.modules.hypernet import Hypernetwork
from FACEflow.modules.pipeline import Reenactor
from FACEflow.modules.plots import loss_curve_plot
from FACEflow.modules.results import read_training_log, truncate_training_log
from FACEflow.modules.trainer import create_train_state, resume, run_curriculum


def load_dataset(run_config):
    """The dataset named by the run config, or its synthetic dataset when no path is set."""
    settings = run_config.dataset
    if settings.path:
        dataset = ingest(settings.path)
    else:
        dataset = generate_synthetic_dataset(settings.num_ids, settings.frames_per_id,
                                             run_config.arch.output_resolution, settings.seed,
                                             run_config.encoders.expression_dim, run_config.encoders.shape_dim)
    if dataset.resolution != run_config.arch.output_resolution:
        raise InvalidConfigError(f'Dataset resolution {dataset.resolution} does not match the generator '
                                 f'output resolution {run_config.arch.output_resolution}')
    return dataset


def prepare_pose_oracle(model, dataset, calibrate=True):
    """
    Registers the dataset's known pose parameters with the pose stand-in and, when asked,
    calibrates its regression head on them. Other pose plug-ins are left alone.
    """
    extractor = model.encoders.pose_params
    if not isinstance(extractor, PoseParamExtractor):
        return
    frames = list(dataset.pose_frames())
    if not frames:
        logging.warning('Dataset has no pose metadata, pose parameters come from the regressor only')
        return
    extractor.register_frames(frames)
    if calibrate:
        images, params = zip(*frames)
        extractor.calibrate(torch.stack(images), PoseParams.stack(params))


def build_reenactor(run_config):
    """Builds a freshly initialized reenactment model from the run config."""
    arch_settings = run_config.arch
    arch = scaled_arch(arch_settings.output_resolution, arch_settings.channel_cap)
    generator = Generator(arch, mapping_layers=arch_settings.mapping_layers, use_noise=arch_settings.use_noise,
                          seed=arch_settings.generator_seed)
    encoders = build_encoder_suite(run_config.encoders, generator)
    with seeded(arch_settings.fusion_seed):
        fusion = ReenactmentModule(cross_conditioning=arch_settings.cross_conditioning)
    hypernet = Hypernetwork(arch, sharing=arch_settings.sharing, shared_hidden=arch_settings.shared_hidden,
                            specific_hidden=arch_settings.specific_hidden, seed=arch_settings.hypernet_seed)
    logging.info(f'Built reenactor for {arch.output_resolution}x{arch.output_resolution} output '
                 f'({len(arch.layers)} generator layers, {len(arch.conv_layers)} controlled)')
    return Reenactor(generator, encoders, fusion, hypernet)


def load_reenactor(checkpoint_dir, dataset=None):
    """
    Rebuilds the model stored in a checkpoint.

    :param checkpoint_dir: Checkpoint directory written by training.
    :param dataset: When given, its pose metadata is registered for oracle lookup.
    :return: The model and the run config it was trained with.
    :rtype: tuple[Reenactor, RunConfig]
    """
    checkpoint = load_checkpoint(checkpoint_dir)
    run_config = RunConfig.from_dict(checkpoint.run_config)
    model = restore_model(build_reenactor(run_config), checkpoint)
    if dataset is not None:
        prepare_pose_oracle(model, dataset, calibrate=False)
    model.eval()
    return model, run_config


class ReenactmentApp:
    """A configured run: run config, dataset and model."""

    def __init__(self, run_config, dataset, model):
        self.run_config = run_config
        self.dataset = dataset
        self.model = model

    def train(self, sink, resume_from=None, progress=True):
        """
        Runs the curriculum of the run config, writing logs, checkpoints and the loss curve to ``sink``.

        :return: Path of the final checkpoint.
        :rtype: str
        """
        training = self.run_config.training
        phases = training.schedule.phases
        state = create_train_state(self.model, seed=self.run_config.seed,
                                   learning_rate=phases[0].learning_rate if phases else 0.0)
        if resume_from:
            resume(state, resume_from)
            truncate_training_log(os.path.join(sink, 'training_log.tsv'), state.step)
        final = run_curriculum(state, training.schedule, self.dataset, self.run_config.losses.weights, sink,
                               cross_gaze=self.run_config.losses.cross_gaze,
                               reset_optimizer=training.reset_optimizer, run_config=self.run_config.to_dict(),
                               log_every=training.log_every, checkpoint_every=training.checkpoint_every,
                               progress=progress)
        self.run_config.dump(os.path.join(sink, 'run_config.yaml'))
        log_path = os.path.join(sink, 'training_log.tsv')
        if os.path.exists(log_path):
            loss_curve_plot(read_training_log(log_path), os.path.join(sink, 'loss_curve.png'))
        return final


def create_app(run_config=None, config_object=None):
    """
    Creates a run from a run config.

    Builds the dataset and the model, registers the dataset's pose metadata with the pose
    stand-in and calibrates its regressor.

    :param run_config: The run config; the defaults of the configuration class when omitted.
    :type run_config: RunConfig
    :param config_object: Configuration class, selected by ``FACEFLOW_ENV`` when omitted.
    :return: The configured run.
    :rtype: ReenactmentApp
    :raises InvalidConfigError: If the dataset does not fit the run config.
    :raises DatasetError: If the dataset cannot be read.
    """
    run_config = run_config or RunConfig.defaults(config_object or base_config())
    torch.manual_seed(run_config.seed)
    dataset = load_dataset(run_config)
    model = build_reenactor(run_config)
    prepare_pose_oracle(model, dataset, calibrate=run_config.dataset.calibrate_pose)
    return ReenactmentApp(run_config, dataset, model)
