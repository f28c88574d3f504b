"""
This module drives the three-phase training curriculum.

Phase 1 trains on inversion pairs (a frame reconstructed from itself), phase 2 on self-reenactment
pairs (two frames of one identity) and phase 3 on batches that are half self-reenactment and half
cross-identity pairs. Only the reenactment module and the hypernetwork are optimized, with Adam.

Functions:
    sample_batch: draws the pairs of one batch for a pairing policy.
    create_train_state, train_step, run_curriculum: the training loop.
    train_checkpoint, resume: checkpointing of a training run.
"""
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np
import torch
from tqdm import tqdm

from FACEflow.modules.checkpoint import load_checkpoint, restore_model, save_checkpoint
from FACEflow.modules.errors import InsufficientDataError, InvalidConfigError, NonFiniteLossError
from FACEflow.modules.losses import TERMS, Task, phase_objective, task_terms
from FACEflow.modules.results import append_training_log

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class Phase(IntEnum):
    INVERSION = 1
    SELF = 2
    CROSS = 3


class PairPolicy(str, Enum):
    SAME_FRAME = 'same_frame'
    SAME_IDENTITY = 'same_identity'
    HALF_CROSS = 'half_cross'


DEFAULT_POLICIES = {Phase.INVERSION: PairPolicy.SAME_FRAME, Phase.SELF: PairPolicy.SAME_IDENTITY,
                    Phase.CROSS: PairPolicy.HALF_CROSS}
DEFAULT_LEARNING_RATES = {Phase.INVERSION: 2e-4, Phase.SELF: 2e-4, Phase.CROSS: 1e-4}


@dataclass(frozen=True)
class PhaseSpec:
    phase: Phase
    steps: int
    learning_rate: float = None
    batch_size: int = 16
    pair_policy: PairPolicy = None

    def __post_init__(self):
        object.__setattr__(self, 'phase', Phase(self.phase))
        if self.learning_rate is None:
            object.__setattr__(self, 'learning_rate', DEFAULT_LEARNING_RATES[self.phase])
        object.__setattr__(self, 'pair_policy', PairPolicy(self.pair_policy or DEFAULT_POLICIES[self.phase]))
        if self.steps < 0 or self.batch_size < 1 or not self.learning_rate >= 0:
            raise InvalidConfigError(f'Phase {int(self.phase)} needs non-negative steps and learning rate '
                                     f'and a positive batch size')

    def to_dict(self):
        return {'phase': int(self.phase), 'steps': self.steps, 'learning_rate': self.learning_rate,
                'batch_size': self.batch_size, 'pair_policy': self.pair_policy.value}


@dataclass(frozen=True)
class CurriculumSchedule:
    """
    The phases of a run, in strictly increasing phase order. Subsets of the three phases are
    valid schedules; an empty schedule trains nothing.
    """
    phases: tuple = ()

    def __post_init__(self):
        numbers = [int(spec.phase) for spec in self.phases]
        if any(a >= b for a, b in zip(numbers, numbers[1:])):
            raise InvalidConfigError(f'Curriculum phases must be strictly ordered, got {numbers}')

    @classmethod
    def default(cls, steps=(2000, 2000, 1000), batch_size=16):
        return cls(tuple(PhaseSpec(phase, count, batch_size=batch_size) for phase, count in zip(Phase, steps)))

    @classmethod
    def direct(cls, steps, batch_size=16, learning_rate=2e-4):
        """Training without a curriculum: mixed self and cross batches from the first step."""
        return cls((PhaseSpec(Phase.CROSS, steps, learning_rate, batch_size, PairPolicy.HALF_CROSS),))

    def to_dict(self):
        return {'phases': [spec.to_dict() for spec in self.phases]}

    @classmethod
    def from_dict(cls, values):
        return cls(tuple(PhaseSpec(**spec) for spec in values.get('phases', [])))


@dataclass(frozen=True)
class PairSample:
    source: object
    target: object
    task: Task


def _self_pair(dataset, identities, rng):
    identity = identities[rng.integers(len(identities))]
    frames = dataset.identities[identity]
    first, second = rng.choice(len(frames), size=2, replace=False)
    return PairSample(frames[first], frames[second], Task.SELF)


def _cross_pair(dataset, identities, rng):
    """Random source frame of one identity and random target frame of another; needs two identities."""
    while True:
        source_id, target_id = identities[rng.integers(len(identities))], identities[rng.integers(len(identities))]
        if source_id != target_id:
            break
    sources, targets = dataset.identities[source_id], dataset.identities[target_id]
    return PairSample(sources[rng.integers(len(sources))], targets[rng.integers(len(targets))], Task.CROSS)


def sample_batch(dataset, policy, batch_size, rng):
    """
    Draws the pairs of one training batch.

    :param dataset: Frame dataset to draw from.
    :param policy: A :class:`PairPolicy`, or a :class:`Phase` for its default policy.
    :param batch_size: Number of pairs.
    :param rng: Random generator; the only source of randomness.
    :type rng: numpy.random.Generator
    :return: ``same_frame``: source and target are one frame; ``same_identity``: two different frames
        of one identity; ``half_cross``: ``ceil(B/2)`` such pairs followed by ``floor(B/2)`` pairs of
        different identities.
    :rtype: list[PairSample]
    :raises InsufficientDataError: If the dataset cannot provide the requested pairs.
    """
    policy = DEFAULT_POLICIES[Phase(policy)] if isinstance(policy, int) else PairPolicy(policy)
    identities = dataset.identity_ids
    if not identities:
        raise InsufficientDataError('The dataset is empty')

    if policy is PairPolicy.SAME_FRAME:
        batch = []
        for _ in range(batch_size):
            frames = dataset.identities[identities[rng.integers(len(identities))]]
            frame = frames[rng.integers(len(frames))]
            batch.append(PairSample(frame, frame, Task.INVERSION))
        return batch

    multi_frame = [identity for identity in identities if len(dataset.identities[identity]) >= 2]
    if len(multi_frame) < len(identities):
        raise InsufficientDataError('Self-reenactment pairs need at least 2 frames per identity; '
                                    f'{len(identities) - len(multi_frame)} identities have fewer')
    if policy is PairPolicy.SAME_IDENTITY:
        return [_self_pair(dataset, identities, rng) for _ in range(batch_size)]

    if len(identities) < 2:
        raise InsufficientDataError('Cross-identity pairs need at least 2 identities')
    num_self = math.ceil(batch_size / 2)
    return ([_self_pair(dataset, identities, rng) for _ in range(num_self)]
            + [_cross_pair(dataset, identities, rng) for _ in range(batch_size - num_self)])


@dataclass
class TrainState:
    """The mutable state of a run: model, optimizer, RNG and progress counters."""
    model: object
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    seed: int
    step: int = 0
    phase: Phase = None
    phase_step: int = 0
    completed: list = field(default_factory=list)

    def counters(self):
        return {'step': self.step, 'phase': None if self.phase is None else int(self.phase),
                'phase_step': self.phase_step, 'completed': [int(p) for p in self.completed],
                'seed': self.seed, 'rng': self.rng.bit_generator.state}


def _adam(model, learning_rate):
    return torch.optim.Adam(model.trainable_parameters(), lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def create_train_state(model, seed=0, learning_rate=2e-4):
    return TrainState(model=model, optimizer=_adam(model, learning_rate), rng=np.random.default_rng(seed), seed=seed)


def parameter_digest(module):
    """SHA-256 over all tensors of ``module``, to check that frozen parts stay untouched."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _check_finite(report, step, batch_size):
    for term in TERMS:
        if term in report.raw and not math.isfinite(report.raw[term]):
            indices = [i for i in range(batch_size) if not torch.isfinite(report.per_sample[i])]
            logging.error(f'Loss term {term} is not finite at step {step}')
            raise NonFiniteLossError(step, term, indices)
    if not torch.isfinite(report.total):
        logging.error(f'Total loss is not finite at step {step}')
        raise NonFiniteLossError(step, 'total', [i for i in range(batch_size) if not torch.isfinite(report.per_sample[i])])


def train_step(state, batch, dataset, weights, learning_rate, cross_gaze=False):
    """
    One optimization step on a batch of pairs.

    Runs the reenactment forward pass for every pair, evaluates the objective and applies one
    Adam update to the trainable parameters. ``state`` is updated in place and returned.

    :return: The updated state and the batch's loss report.
    :rtype: tuple[TrainState, LossReport]
    :raises NonFiniteLossError: If a loss term is NaN or infinite; no update is applied then.
    """
    model = state.model
    dtype = next(iter(model.trainable_parameters())).dtype
    sources = dataset.load_batch([pair.source for pair in batch]).to(dtype)
    targets = dataset.load_batch([pair.target for pair in batch]).to(dtype)

    model.train()
    for group in state.optimizer.param_groups:
        group['lr'] = learning_rate
    images = model.reenact(sources, targets)
    diverged = [i for i in range(len(batch)) if not torch.isfinite(images[i]).all()]
    if diverged:
        term = task_terms(batch[diverged[0]].task)[0]
        logging.error(f'Reenacted frames are not finite at step {state.step}')
        raise NonFiniteLossError(state.step, term, diverged)
    report = phase_objective([pair.task for pair in batch], sources, targets, images, weights, model.encoders,
                             cross_gaze=cross_gaze)
    _check_finite(report, state.step, len(batch))

    state.optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    state.optimizer.step()
    state.step += 1
    state.phase_step += 1
    return state, report


def train_checkpoint(state, directory, run_config=None):
    save_checkpoint(directory, state.model.state_dict(), run_config=run_config,
                    trainer_state=state.counters(), optimizer_state=state.optimizer.state_dict())
    return directory


def resume(state, checkpoint_dir):
    """Restores model, optimizer moments, counters and RNG state from a training checkpoint."""
    checkpoint = load_checkpoint(checkpoint_dir)
    restore_model(state.model, checkpoint)
    if checkpoint.optimizer_state is not None:
        state.optimizer.load_state_dict(checkpoint.optimizer_state)
    counters = checkpoint.trainer_state
    state.step = counters.get('step', 0)
    state.phase = None if counters.get('phase') is None else Phase(counters['phase'])
    state.phase_step = counters.get('phase_step', 0)
    state.completed = [Phase(p) for p in counters.get('completed', [])]
    state.seed = counters.get('seed', state.seed)
    if 'rng' in counters:
        state.rng.bit_generator.state = counters['rng']
    logging.info(f'Resumed training from {checkpoint_dir} at step {state.step}')
    return state


def run_curriculum(state, schedule, dataset, weights, sink, cross_gaze=False, reset_optimizer=False,
                   run_config=None, log_every=50, checkpoint_every=0, progress=True):
    """
    Runs the phases of ``schedule`` in order, carrying parameters from phase to phase.

    Each step appends a row to ``sink/training_log.tsv``; each finished phase writes
    ``sink/checkpoint-phase<N>``. A state restored with :func:`resume` continues where the run
    stopped, skipping completed phases.

    :param state: Training state (fresh or resumed).
    :type state: TrainState
    :param schedule: The phases to run.
    :type schedule: CurriculumSchedule
    :param sink: Output directory for the log and checkpoints.
    :param reset_optimizer: Start every phase after the first with fresh Adam moments.
    :param checkpoint_every: Also write ``sink/checkpoint-latest`` every this many steps (0: never).
    :return: Path of the last checkpoint written.
    :rtype: str
    :raises NonFiniteLossError: From :func:`train_step`.
    """
    os.makedirs(sink, exist_ok=True)
    log_path = os.path.join(sink, 'training_log.tsv')
    if not schedule.phases:
        logging.info('Empty curriculum, writing the initial model only')
        return train_checkpoint(state, os.path.join(sink, 'checkpoint-initial'), run_config)

    final = None
    for spec in schedule.phases:
        if spec.phase in state.completed:
            continue
        if state.phase != spec.phase:
            if reset_optimizer and state.completed:
                state.optimizer = _adam(state.model, spec.learning_rate)
            state.phase, state.phase_step = spec.phase, 0
            logging.info(f'Starting phase {int(spec.phase)} ({spec.pair_policy.value} pairs, {spec.steps} steps, '
                         f'lr {spec.learning_rate}, batch {spec.batch_size})')

        for _ in tqdm(range(state.phase_step, spec.steps), desc=f'Phase {int(spec.phase)}', disable=not progress):
            batch = sample_batch(dataset, spec.pair_policy, spec.batch_size, state.rng)
            state, report = train_step(state, batch, dataset, weights, spec.learning_rate, cross_gaze)
            append_training_log(log_path, state.step, int(spec.phase), report)
            if log_every and state.step % log_every == 0:
                total = float(report.total.detach())
                logging.info(f'Step {state.step} (phase {int(spec.phase)}): total loss {total:.4f}')
            if checkpoint_every and state.step % checkpoint_every == 0:
                train_checkpoint(state, os.path.join(sink, 'checkpoint-latest'), run_config)

        state.completed.append(spec.phase)
        final = train_checkpoint(state, os.path.join(sink, f'checkpoint-phase{int(spec.phase)}'), run_config)
    if final is None:
        logging.info('Every phase of the schedule is already completed')
        last = os.path.join(sink, f'checkpoint-phase{int(schedule.phases[-1].phase)}')
        final = train_checkpoint(state, last, run_config)
    return final
