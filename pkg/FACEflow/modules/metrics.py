"""
This module contains the evaluation metrics and protocols.

Metrics: identity cosine similarity (csim), perceptual distance (lpips), average pose distance in
degrees (apd), average expression distance (aed), gaze error and a Fréchet distance between
Gaussian fits of feature sets. The Fréchet score runs on the stand-in features and is not
comparable to published FID values.

Functions:
    csim, apd, aed, gaze_error, frechet_distance, frechet_score: the metrics.
    build_large_pose_benchmark: selects source/target pairs with large pose differences.
    evaluate_self, evaluate_cross: the evaluation protocols.
    self_reenactment_frechet: Fréchet score of self-reenacted frames against their targets.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import linalg
from tqdm import tqdm

from FACEflow.modules.encoders import wrap_degrees
from FACEflow.modules.errors import ConformanceError, DatasetError, InsufficientDataError
from FACEflow.modules.losses import l_lpips

METRICS = ('csim', 'lpips', 'apd', 'aed', 'gaze')


@dataclass(frozen=True, order=True)
class EvalRecord:
    video: str
    frame: int
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConformanceError(f'Unknown metric "{self.metric}", expected one of {METRICS}')
        if not math.isfinite(self.value):
            raise ConformanceError(f'Metric {self.metric} of {self.video}/{self.frame} is not finite')


def cosine_similarity(ea, eb):
    return (torch.nn.functional.normalize(ea, dim=-1) * torch.nn.functional.normalize(eb, dim=-1)).sum(dim=-1)


def csim(a, b, identity_encoder):
    """Cosine similarity of the identity embeddings of two images (or batches), in [-1, 1]."""
    return cosine_similarity(identity_encoder(a), identity_encoder(b))


def apd(p, q):
    """Mean absolute difference of yaw, pitch and roll in degrees, wrapped so it never exceeds 180."""
    return wrap_degrees(p.euler - q.euler).abs().mean(dim=-1)


def aed(p, q):
    """Mean absolute difference of the expression coefficients."""
    if p.expression.shape[-1] != q.expression.shape[-1]:
        raise ConformanceError(f'Expression vectors differ in length: {p.expression.shape[-1]} '
                               f'vs {q.expression.shape[-1]}')
    return (p.expression - q.expression).abs().mean(dim=-1)


def gaze_error(a, b, estimator):
    """
    Euclidean distance between the gaze estimates of two image batches.

    :param a: ``[B, 3, R, R]`` images.
    :param b: ``[B, 3, R, R]`` images.
    :param estimator: Maps an image batch to ``[B, 2]`` gaze angles.
    :return: ``[B]`` distances.
    :rtype: torch.Tensor
    """
    return torch.linalg.vector_norm(estimator(a) - estimator(b), dim=-1)


def frechet_distance(mu1, sigma1, mu2, sigma2):
    """
    Fréchet distance between two Gaussians.

    The trace of the covariance geometric mean is taken from the eigenvalues of
    ``sqrt(sigma1) @ sigma2 @ sqrt(sigma1)``, which is symmetric, so only symmetric
    eigendecompositions are needed.

    :return: ``|mu1 - mu2|^2 + tr(sigma1 + sigma2 - 2 (sigma1 sigma2)^(1/2))``, clamped at 0.
    :rtype: float
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=np.float64)), np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    sigma1, sigma2 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64)), np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ConformanceError('Both Gaussians must have the same dimension')

    eigenvalues, eigenvectors = linalg.eigh(sigma1)
    sqrt_sigma1 = (eigenvectors * np.sqrt(np.clip(eigenvalues, 0, None))) @ eigenvectors.T
    product = sqrt_sigma1 @ sigma2 @ sqrt_sigma1
    covmean_trace = np.sqrt(np.clip(linalg.eigh((product + product.T) / 2, eigvals_only=True), 0, None)).sum()

    distance = np.sum((mu1 - mu2) ** 2) + np.trace(sigma1) + np.trace(sigma2) - 2 * covmean_trace
    return float(max(distance, 0.0))


def feature_statistics(features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise InsufficientDataError('The Fréchet score needs at least 2 samples per set')
    return features.mean(axis=0), np.cov(features, rowvar=False)


@torch.no_grad()
def frechet_score(set_a, set_b, feature_extractor):
    """
    Fréchet distance between Gaussian fits of the pooled features of two image sets.

    :param set_a: ``[N, 3, R, R]`` images, N >= 2.
    :param set_b: ``[M, 3, R, R]`` images, M >= 2.
    :param feature_extractor: Maps an image batch to ``[N, D]`` features.
    :raises InsufficientDataError: If a set has fewer than 2 images.
    """
    stats_a = feature_statistics(feature_extractor(set_a).detach().cpu().double().numpy())
    stats_b = feature_statistics(feature_extractor(set_b).detach().cpu().double().numpy())
    return frechet_distance(*stats_a, *stats_b)


@dataclass(frozen=True)
class BenchmarkPair:
    source: object
    target: object
    pose_distance: float


@dataclass(frozen=True)
class PairBenchmark:
    pairs: tuple
    threshold_deg: float
    per_video: int


def build_large_pose_benchmark(dataset, pose_of=None, threshold_deg=15.0, per_video=5):
    """
    Selects, per video, the frame pairs with the largest head pose differences.

    Every pair of frames ``i < j`` whose pose distance is strictly above ``threshold_deg`` is a
    candidate; candidates are ranked by descending distance, then by frame indices, and the first
    ``per_video`` are kept with frame ``i`` as source.

    :param dataset: The frame dataset.
    :param pose_of: Maps a frame ref to its :class:`PoseParams`; the dataset metadata when omitted.
    :return: The benchmark pairs, in video order.
    :rtype: PairBenchmark
    :raises DatasetError: If a frame has no pose parameters.
    """
    pose_of = pose_of or dataset.pose_params
    pairs = []
    for video in dataset.identity_ids:
        frames = dataset.identities[video]
        poses = []
        for ref in frames:
            params = pose_of(ref)
            if params is None:
                raise DatasetError(f'No pose parameters for frame {video}/{ref.index}')
            poses.append(params.euler.double())
        candidates = []
        for i in range(len(frames)):
            for j in range(i + 1, len(frames)):
                distance = float(wrap_degrees(poses[i] - poses[j]).abs().mean())
                if distance > threshold_deg:
                    candidates.append((-distance, i, j))
        for negative, i, j in sorted(candidates)[:per_video]:
            pairs.append(BenchmarkPair(frames[i], frames[j], -negative))
    logging.info(f'Selected {len(pairs)} benchmark pairs from {len(dataset.identities)} videos '
                 f'(threshold {threshold_deg} deg, at most {per_video} per video)')
    return PairBenchmark(tuple(pairs), threshold_deg, per_video)


def build_cross_pairs(dataset, per_video=5):
    """
    Cross-identity pairs: the first frame of each video as source, driven by the first
    ``per_video`` frames of the next video in identity order.
    """
    videos = dataset.identity_ids
    if len(videos) < 2:
        raise InsufficientDataError('Cross-identity evaluation needs at least 2 videos')
    pairs = []
    for position, video in enumerate(videos):
        source = dataset.identities[video][0]
        pairs += [(source, target) for target in dataset.identities[videos[(position + 1) % len(videos)]][:per_video]]
    return pairs


def _chunks(items, size):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def _available(dataset, refs):
    present = []
    for ref in refs:
        if dataset.contains(ref):
            present.append(ref)
        else:
            logging.warning(f'Frame {ref.identity}/{ref.index} is missing, skipping it')
    return present


def _self_reenactments(model, dataset, include_source, batch_size, progress):
    """Yields ``(video, refs, target images, reenacted images)`` chunks of the self-reenactment protocol."""
    for video in tqdm(dataset.identity_ids, desc='Self-reenactment', disable=not progress):
        frames = _available(dataset, dataset.identities[video])
        if not frames or frames[0].index != 0:
            logging.warning(f'Video {video} has no source frame, skipping it')
            continue
        source = dataset.load(frames[0])
        targets = frames if include_source else frames[1:]
        for chunk in _chunks(targets, batch_size):
            target_images = dataset.load_batch(chunk)
            yield video, chunk, target_images, model.reenact(source, target_images).to(target_images.dtype)


@torch.no_grad()
def evaluate_self(model, dataset, encoders=None, include_source=False, batch_size=16, progress=False):
    """
    Self-reenactment protocol: the first frame of every video is reenacted with the pose of each
    remaining frame, and the result is compared with that frame.

    :param model: Anything with ``reenact(source, targets)``, usually a :class:`Reenactor`.
    :param dataset: The evaluation dataset.
    :param encoders: Encoder suite for the metrics; ``model.encoders`` when omitted.
    :param include_source: Also reenact frame 0 with its own pose.
    :return: csim, lpips, apd, aed and gaze records per target frame, sorted by (video, frame, metric).
    :rtype: list[EvalRecord]
    """
    encoders = encoders or model.encoders
    records = []
    for video, chunk, target_images, reenacted in _self_reenactments(model, dataset, include_source, batch_size,
                                                                      progress):
        produced, reference = (encoders.extract_pose_params(reenacted),
                               encoders.extract_pose_params(target_images))
        values = {
            'csim': csim(reenacted, target_images, encoders.identity_embedding),
            'lpips': l_lpips(reenacted, target_images, encoders.perceptual_features),
            'apd': apd(produced, reference),
            'aed': aed(produced, reference),
            'gaze': torch.linalg.vector_norm(produced.gaze - reference.gaze, dim=-1),
        }
        for position, ref in enumerate(chunk):
            records.extend(EvalRecord(video, ref.index, metric, float(values[metric][position]))
                           for metric in METRICS)
    return sorted(records)


def pooled_features(encoders):
    """Feature extractor for the Fréchet score: spatially averaged deepest appearance-encoder activations."""
    def extract(images):
        return encoders.perceptual_features(images)[-1].mean(dim=(2, 3))
    return extract


@torch.no_grad()
def self_reenactment_frechet(model, dataset, encoders=None, include_source=False, batch_size=16):
    """
    Fréchet score between the reenacted frames of the self-reenactment protocol and their targets.

    :return: The score and the number of compared frames.
    :rtype: tuple[float, int]
    :raises InsufficientDataError: If the protocol yields fewer than 2 frames.
    """
    encoders = encoders or model.encoders
    reenacted, targets = [], []
    for _, _, target_images, images in _self_reenactments(model, dataset, include_source, batch_size, False):
        reenacted.append(images)
        targets.append(target_images)
    if not targets:
        raise InsufficientDataError('The Fréchet score needs at least 2 samples per set')
    reenacted, targets = torch.cat(reenacted), torch.cat(targets)
    return frechet_score(reenacted, targets, pooled_features(encoders)), len(targets)


@torch.no_grad()
def evaluate_cross(model, pairs, dataset, encoders=None, progress=False):
    """
    Cross-identity protocol: csim against the source, apd and aed against the target.

    :param pairs: ``(source_ref, target_ref)`` tuples or :class:`BenchmarkPair` objects.
    :return: Records keyed by ``<source video>/<target video>`` and the target frame index,
        sorted by (video, frame, metric).
    :rtype: list[EvalRecord]
    """
    encoders = encoders or model.encoders
    records = []
    for pair in tqdm(pairs, desc='Cross-reenactment', disable=not progress):
        source_ref, target_ref = (pair.source, pair.target) if isinstance(pair, BenchmarkPair) else pair
        if len(_available(dataset, [source_ref, target_ref])) < 2:
            continue
        source, target = dataset.load(source_ref), dataset.load(target_ref)
        reenacted = model.reenact(source, target).to(source.dtype)
        produced = encoders.extract_pose_params(reenacted)
        reference = encoders.extract_pose_params(target)
        video = f'{source_ref.identity}/{target_ref.identity}'
        records += [
            EvalRecord(video, target_ref.index, 'csim', float(csim(reenacted, source.unsqueeze(0),
                                                                   encoders.identity_embedding)[0])),
            EvalRecord(video, target_ref.index, 'apd', float(apd(produced, reference)[0])),
            EvalRecord(video, target_ref.index, 'aed', float(aed(produced, reference)[0])),
        ]
    return sorted(records)
