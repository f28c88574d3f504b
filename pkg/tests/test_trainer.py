import math
import os

import numpy as np
import pytest
import torch

from FACEflow.app import create_app, load_reenactor
from FACEflow.config import DevelopmentConfig, RunConfig
from FACEflow.modules.dataset import generate_synthetic_dataset
from FACEflow.modules.errors import InsufficientDataError, InvalidConfigError, NonFiniteLossError
from FACEflow.modules.losses import LossWeights, Task
from FACEflow.modules.metrics import evaluate_self
from FACEflow.modules.results import read_training_log
from FACEflow.modules.trainer import CurriculumSchedule, PairPolicy, Phase, PhaseSpec, create_train_state, \
    parameter_digest, resume, run_curriculum, sample_batch, train_step


def test_half_cross_batches_split_evenly(tiny_dataset):
    rng = np.random.default_rng(0)
    for _ in range(100):
        batch = sample_batch(tiny_dataset, Phase.CROSS, 16, rng)
        tasks = [pair.task for pair in batch]
        assert tasks.count(Task.SELF) == 8
        assert tasks.count(Task.CROSS) == 8
        for pair in batch:
            if pair.task is Task.CROSS:
                assert pair.source.identity != pair.target.identity
            else:
                assert pair.source.identity == pair.target.identity
                assert pair.source != pair.target


def test_odd_batches_favor_self_pairs(tiny_dataset):
    batch = sample_batch(tiny_dataset, PairPolicy.HALF_CROSS, 5, np.random.default_rng(1))
    assert [pair.task for pair in batch].count(Task.SELF) == 3


def test_inversion_pairs_use_one_frame(tiny_dataset):
    batch = sample_batch(tiny_dataset, Phase.INVERSION, 6, np.random.default_rng(2))
    assert all(pair.source == pair.target and pair.task is Task.INVERSION for pair in batch)


def test_sampling_needs_enough_data():
    single_frames = generate_synthetic_dataset(3, 1, 8, seed=0, expression_dim=4, shape_dim=2)
    with pytest.raises(InsufficientDataError):
        sample_batch(single_frames, Phase.SELF, 2, np.random.default_rng(0))
    single_identity = generate_synthetic_dataset(1, 3, 8, seed=0, expression_dim=4, shape_dim=2)
    with pytest.raises(InsufficientDataError):
        sample_batch(single_identity, Phase.CROSS, 2, np.random.default_rng(0))


def test_schedule_must_be_ordered():
    with pytest.raises(InvalidConfigError):
        CurriculumSchedule((PhaseSpec(2, 1), PhaseSpec(1, 1)))
    assert CurriculumSchedule.from_dict(CurriculumSchedule.default().to_dict()) == CurriculumSchedule.default()


def test_step_updates_only_trainable_parts(tiny_reenactor, tiny_dataset):
    state = create_train_state(tiny_reenactor, seed=0, learning_rate=1e-3)
    frozen = {name: parameter_digest(module) for name, module in tiny_reenactor.frozen_modules().items()}
    trainable = parameter_digest(tiny_reenactor.hypernet)

    batch = sample_batch(tiny_dataset, Phase.SELF, 2, state.rng)
    state, report = train_step(state, batch, tiny_dataset, LossWeights(), 1e-3)
    assert state.step == 1
    assert math.isfinite(float(report.total))
    assert {name: parameter_digest(module) for name, module in tiny_reenactor.frozen_modules().items()} == frozen
    assert parameter_digest(tiny_reenactor.hypernet) != trainable


def test_zero_learning_rate_changes_nothing(tiny_reenactor, tiny_dataset):
    state = create_train_state(tiny_reenactor, seed=0, learning_rate=0.0)
    before = parameter_digest(tiny_reenactor)
    batch = sample_batch(tiny_dataset, Phase.INVERSION, 2, state.rng)
    train_step(state, batch, tiny_dataset, LossWeights(), 0.0)
    assert parameter_digest(tiny_reenactor) == before


def test_non_finite_loss_stops_before_update(tiny_reenactor, tiny_dataset):
    with torch.no_grad():
        tiny_reenactor.hypernet.shared_heads.mix.bias.fill_(float('nan'))
    state = create_train_state(tiny_reenactor)
    before = parameter_digest(tiny_reenactor.hypernet)
    batch = sample_batch(tiny_dataset, Phase.SELF, 2, state.rng)
    with pytest.raises(NonFiniteLossError) as error:
        train_step(state, batch, tiny_dataset, LossWeights(), 1e-3)
    assert error.value.step == 0
    assert error.value.batch_indices == [0, 1]
    assert state.step == 0
    assert parameter_digest(tiny_reenactor.hypernet) == before


def test_curriculum_writes_log_and_checkpoints(tiny_run_config, tiny_reenactor, tiny_dataset, tmp_path):
    state = create_train_state(tiny_reenactor, seed=tiny_run_config.seed)
    final = run_curriculum(state, tiny_run_config.training.schedule, tiny_dataset, LossWeights(), str(tmp_path),
                           run_config=tiny_run_config.to_dict(), progress=False)
    assert final == os.path.join(str(tmp_path), 'checkpoint-phase3')
    for phase in (1, 2, 3):
        assert os.path.isdir(tmp_path / f'checkpoint-phase{phase}')
    log = read_training_log(str(tmp_path / 'training_log.tsv'))
    assert log['step'] == [1, 2, 3, 4, 5, 6]
    assert log['phase'] == [1, 1, 2, 2, 3, 3]
    assert all(value == 0.0 for value in log['raw_shape'][:2])
    assert state.completed == [Phase.INVERSION, Phase.SELF, Phase.CROSS]


def test_empty_schedule_writes_initial_model(tiny_reenactor, tiny_dataset, tmp_path):
    state = create_train_state(tiny_reenactor)
    final = run_curriculum(state, CurriculumSchedule(), tiny_dataset, LossWeights(), str(tmp_path), progress=False)
    assert final.endswith('checkpoint-initial')
    assert not os.path.exists(tmp_path / 'training_log.tsv')


def test_resume_continues_identically(tiny_run_config, tmp_path):
    schedule = tiny_run_config.training.schedule

    straight = create_app(tiny_run_config)
    state = create_train_state(straight.model, seed=tiny_run_config.seed)
    run_curriculum(state, schedule, straight.dataset, LossWeights(), str(tmp_path / 'straight'), progress=False)

    first = create_app(tiny_run_config)
    partial = CurriculumSchedule(schedule.phases[:1])
    state = create_train_state(first.model, seed=tiny_run_config.seed)
    run_curriculum(state, partial, first.dataset, LossWeights(), str(tmp_path / 'split'), progress=False)

    second = create_app(tiny_run_config)
    state = resume(create_train_state(second.model, seed=tiny_run_config.seed),
                   str(tmp_path / 'split' / 'checkpoint-phase1'))
    assert state.step == 2 and state.completed == [Phase.INVERSION]
    run_curriculum(state, schedule, second.dataset, LossWeights(), str(tmp_path / 'split'), progress=False)

    straight_log = read_training_log(str(tmp_path / 'straight' / 'training_log.tsv'))
    split_log = read_training_log(str(tmp_path / 'split' / 'training_log.tsv'))
    assert split_log['step'] == straight_log['step']
    assert split_log['total'] == pytest.approx(straight_log['total'], rel=1e-5)


def test_resuming_a_finished_run_writes_its_checkpoint(tiny_run_config, tmp_path):
    create_app(tiny_run_config).train(str(tmp_path / 'done'), progress=False)
    final = create_app(tiny_run_config).train(str(tmp_path / 'again'),
                                              resume_from=str(tmp_path / 'done' / 'checkpoint-phase3'),
                                              progress=False)
    assert final == os.path.join(str(tmp_path / 'again'), 'checkpoint-phase3')
    assert os.path.isdir(final)
    assert not os.path.exists(tmp_path / 'again' / 'training_log.tsv')


def _smoke_config(steps=(200, 200, 0)):
    return RunConfig.from_dict({
        'seed': 0,
        'arch': {'output_resolution': 32, 'channel_cap': 64, 'mapping_layers': 2, 'shared_hidden': 16,
                 'specific_hidden': 16},
        'dataset': {'num_ids': 10, 'frames_per_id': 20, 'seed': 7},
        'training': {'phases': [{'phase': phase, 'steps': count, 'batch_size': 4}
                                for phase, count in zip((1, 2, 3), steps) if count],
                     'log_every': 50},
    }, DevelopmentConfig)


@pytest.mark.slow
def test_smoke_training_reduces_inversion_loss(tmp_path):
    app = create_app(_smoke_config())
    app.train(str(tmp_path), progress=False)
    log = read_training_log(str(tmp_path / 'training_log.tsv'))
    totals = [total for total, phase in zip(log['total'], log['phase']) if phase == 1]
    start, end = np.mean(totals[:10]), np.mean(totals[-10:])
    assert end <= 0.5 * start
    assert os.path.isfile(tmp_path / 'loss_curve.png')


@pytest.mark.slow
def test_identical_seeds_give_identical_logs(tmp_path):
    config = _smoke_config((20, 20, 20))
    for name in ('a', 'b'):
        create_app(config).train(str(tmp_path / name), progress=False)
    assert (tmp_path / 'a' / 'training_log.tsv').read_text() == (tmp_path / 'b' / 'training_log.tsv').read_text()


@pytest.mark.slow
def test_self_phase_improves_held_out_pose_error(tmp_path):
    config = _smoke_config((200, 200, 0))
    create_app(config).train(str(tmp_path), progress=False)
    held_out = generate_synthetic_dataset(5, 10, 32, seed=11, expression_dim=config.encoders.expression_dim,
                                          shape_dim=config.encoders.shape_dim)
    pose_errors = {}
    for phase in (1, 2):
        model, _ = load_reenactor(str(tmp_path / f'checkpoint-phase{phase}'), held_out)
        records = evaluate_self(model, held_out)
        pose_errors[phase] = np.mean([record.value for record in records if record.metric == 'apd'])
    assert pose_errors[2] < pose_errors[1]
