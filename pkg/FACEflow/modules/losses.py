"""
This module contains the loss terms and the per-task training objectives.

Every term works on single images (returning a 0-d tensor) or on batches (returning one value
per sample), so the objective can pick, sample by sample, the terms its task includes:

    Inversion  pix, lpips, id, gaze           (real frame vs reconstruction)
    Self       pix, lpips, id, shape, gaze    (target vs reenacted)
    Cross      id vs the source, shape vs the target, gaze only with ``cross_gaze``

Functions:
    l_pix, l_lpips, l_id, l_shape, l_gaze: the individual terms.
    combine_terms: weighted total from raw term values.
    phase_objective: differentiable objective of a batch of reenacted samples.
"""
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import torch
from torch.nn import functional as F

from FACEflow.modules.encoders import facial_shape
from FACEflow.modules.errors import ConformanceError, InvalidConfigError

TERMS = ('pix', 'lpips', 'id', 'shape', 'gaze')


class Task(str, Enum):
    INVERSION = 'Inversion'
    SELF = 'Self'
    CROSS = 'Cross'


def as_task(tag):
    try:
        return tag if isinstance(tag, Task) else Task(tag)
    except ValueError:
        raise ConformanceError(f'Unknown task tag "{tag}", expected one of {[t.value for t in Task]}') from None


@dataclass(frozen=True)
class LossWeights:
    lambda_pix: float = 10.0
    lambda_lpips: float = 5.0
    lambda_id: float = 10.0
    lambda_sh: float = 0.5
    lambda_g: float = 2.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise InvalidConfigError(f'Loss weight {name} must be a finite non-negative number, got {value}')

    def for_term(self, term):
        return dict(zip(TERMS, (self.lambda_pix, self.lambda_lpips, self.lambda_id,
                                self.lambda_sh, self.lambda_g)))[term]


def task_terms(task, cross_gaze=False):
    """The loss terms a sample of ``task`` contributes to."""
    task = as_task(task)
    if task is Task.INVERSION:
        return ('pix', 'lpips', 'id', 'gaze')
    if task is Task.SELF:
        return TERMS
    return ('id', 'shape', 'gaze') if cross_gaze else ('id', 'shape')


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ConformanceError(f'Loss inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}')


def _per_sample(fn, a, b):
    single = a.dim() == 3
    values = fn(a.unsqueeze(0), b.unsqueeze(0)) if single else fn(a, b)
    return values.squeeze(0) if single else values


def l_pix(a, b):
    """Mean absolute pixel difference."""
    _check_pair(a, b)
    return (a - b).abs().flatten(start_dim=-3).mean(dim=-1)


def l_lpips(a, b, feature_extractor):
    """
    Perceptual distance: squared differences of channel-normalized features, averaged over space
    and over the levels ``feature_extractor`` returns for a batch of images.
    """
    _check_pair(a, b)

    def distance(x, y):
        levels = list(zip(feature_extractor(x), feature_extractor(y)))
        if not levels:
            raise ConformanceError('Perceptual feature extractor returned no feature levels')
        per_level = [(F.normalize(fx, dim=1, eps=1e-10) - F.normalize(fy, dim=1, eps=1e-10))
                     .pow(2).sum(dim=1).mean(dim=(1, 2)) for fx, fy in levels]
        return torch.stack(per_level).mean(dim=0)
    return _per_sample(distance, a, b)


def identity_distance(ea, eb):
    """One minus the cosine of two unit embeddings, in [0, 2]."""
    return 1 - (ea * eb).sum(dim=-1)


def l_id(a, b, identity_encoder):
    """
    Identity distance of two image batches.

    :param a: Reenacted images.
    :param b: Reference images of the same shape.
    :param identity_encoder: Maps images to unit identity embeddings.
    :return: Per-sample :func:`identity_distance`.
    :rtype: torch.Tensor
    """
    _check_pair(a, b)
    return _per_sample(lambda x, y: identity_distance(identity_encoder(x), identity_encoder(y)), a, b)


def shape_descriptor(params):
    """Flattened landmark set of :func:`FACEflow.modules.encoders.facial_shape`."""
    return facial_shape(params).flatten(start_dim=-2)


def l_shape(a, b, pose_extractor):
    """Mean absolute difference of the 3D landmark descriptors of both images."""
    _check_pair(a, b)

    def distance(x, y):
        return (shape_descriptor(pose_extractor(x)) - shape_descriptor(pose_extractor(y))).abs().mean(dim=-1)
    return _per_sample(distance, a, b)


def l_gaze(a, b, gaze_estimator):
    """Euclidean distance between the estimated gaze directions."""
    _check_pair(a, b)
    return _per_sample(lambda x, y: torch.linalg.vector_norm(gaze_estimator(x) - gaze_estimator(y), dim=-1), a, b)


def combine_terms(task, raw, weights, cross_gaze=False):
    """Weighted sum of the raw term values that ``task`` includes."""
    return sum(weights.for_term(term) * raw[term] for term in task_terms(task, cross_gaze))


@dataclass
class LossReport:
    """
    Loss terms of a batch.

    ``raw`` holds each term's mean over the samples that include it, ``weighted`` its weighted sum
    divided by the batch size, so ``total`` (the mean of ``per_sample``) is the sum of ``weighted``.
    Terms no sample includes are absent. ``total`` and ``per_sample`` keep their autograd graph.
    """
    raw: dict
    weighted: dict
    total: torch.Tensor
    per_sample: torch.Tensor
    tasks: list = field(default_factory=list)

    def as_row(self):
        row = {'total': float(self.total.detach())}
        for term in TERMS:
            row[f'raw_{term}'] = self.raw.get(term, 0.0)
            row[f'weighted_{term}'] = self.weighted.get(term, 0.0)
        return row


def phase_objective(tasks, source, target, reenacted, weights, encoders, cross_gaze=False):
    """
    Computes the training objective of a batch.

    :param tasks: One task tag per sample, or a single tag for the whole batch.
    :param source: Source frames ``[B, 3, R, R]``.
    :param target: Target frames (the real frame itself for inversion samples).
    :param reenacted: Generated frames, differentiable with respect to the trainable parameters.
    :param weights: Loss weights.
    :type weights: LossWeights
    :param encoders: The frozen encoder suite providing features, embeddings, pose and gaze.
    :type encoders: FACEflow.modules.encoders.EncoderSuite
    :param cross_gaze: Include the gaze term for cross samples.
    :return: The report; ``report.total`` is the value to minimize.
    :rtype: LossReport
    :raises ConformanceError: For unknown task tags or mismatched batches.
    """
    batch = reenacted.shape[0]
    tasks = [as_task(tasks)] * batch if isinstance(tasks, (str, Task)) else [as_task(t) for t in tasks]
    if len(tasks) != batch or source.shape != reenacted.shape or target.shape != reenacted.shape:
        raise ConformanceError('Task list, source, target and reenacted frames must cover the same batch')

    def reference(term, i):
        return source if term == 'id' and tasks[i] is Task.CROSS else target

    computations = {
        'pix': l_pix,
        'lpips': lambda a, b: l_lpips(a, b, encoders.perceptual_features),
        'id': lambda a, b: l_id(a, b, encoders.identity_embedding),
        'shape': lambda a, b: l_shape(a, b, encoders.extract_pose_params),
        'gaze': lambda a, b: l_gaze(a, b, encoders.estimate_gaze),
    }

    contributions = [reenacted.new_zeros(()) for _ in range(batch)]
    raw, weighted = {}, {}
    for term in TERMS:
        indices = [i for i, task in enumerate(tasks) if term in task_terms(task, cross_gaze)]
        if not indices:
            continue
        refs = torch.stack([reference(term, i)[i] for i in indices])
        values = computations[term](refs, reenacted[indices])
        weight = weights.for_term(term)
        for position, i in enumerate(indices):
            contributions[i] = contributions[i] + weight * values[position]
        raw[term] = float(values.detach().mean())
        weighted[term] = weight * float(values.detach().sum()) / batch

    per_sample = torch.stack(contributions)
    return LossReport(raw=raw, weighted=weighted, total=per_sample.mean(), per_sample=per_sample,
                      tasks=[t.value for t in tasks])
