"""
This module provides the frozen encoders the reenactment pipeline reads its inputs from.

Five roles are served through one plug-in registry: appearance features, pose features, pose
parameters (Euler angles, expression, 3D shape, gaze), identity embeddings and W+ inversion.
Each role ships a deterministic stand-in built from a fixed seed; a pretrained network can be
registered under another name and selected from the run config instead.

Classes:
    FeatureMap, PoseParams: the contracts downstream modules rely on.
    EncoderSettings, EncoderManifest: configuration and plug-in description.
    EncoderSuite: the bundle of role implementations the pipeline talks to.

Functions:
    check_image: validates and batches image tensors.
    facial_shape: sparse 3D landmark descriptor of a set of pose parameters.
    register_encoder, build_encoder_suite: the plug-in registry.
"""
import functools
import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from FACEflow.modules.errors import ConformanceError, InvalidConfigError
from FACEflow.modules.generator import STYLE_DIM, LatentCode, all_finite, seeded

FEATURE_SIZE = 7
NUM_LANDMARKS = 24
LANDMARK_SEED = 2023


class FeatureKind(str, Enum):
    APPEARANCE = 'Appearance'
    POSE = 'Pose'
    FUSED = 'Fused'


FEATURE_CHANNELS = {FeatureKind.APPEARANCE: 512, FeatureKind.POSE: 2048, FeatureKind.FUSED: 512}


@dataclass
class FeatureMap:
    """
    A spatial feature grid, ``[C, 7, 7]`` or batched ``[B, C, 7, 7]``.

    The channel count is fixed by ``kind``: 512 for appearance and fused maps, 2048 for pose maps.
    """
    data: torch.Tensor
    kind: FeatureKind

    def __post_init__(self):
        expected = (FEATURE_CHANNELS[self.kind], FEATURE_SIZE, FEATURE_SIZE)
        if self.data.dim() not in (3, 4) or tuple(self.data.shape[-3:]) != expected:
            raise ConformanceError(f'{self.kind.value} feature map of shape {tuple(self.data.shape)}, '
                                   f'expected {expected}')
        if not all_finite(self.data):
            raise ConformanceError(f'{self.kind.value} feature map contains non-finite values')


def wrap_degrees(angles):
    """Maps angles in degrees into (-180, 180]."""
    return 180 - torch.remainder(180 - angles, 360)


@dataclass
class PoseParams:
    """
    Facial pose parameters of one image, or of a batch when every field has a leading dimension.

    :ivar euler: Yaw, pitch and roll in degrees, within (-180, 180].
    :ivar expression: Expression coefficients, ``E`` of them.
    :ivar shape3d: Identity geometry coefficients, ``S`` of them.
    :ivar gaze: Gaze pitch and yaw in radians.
    """
    euler: torch.Tensor
    expression: torch.Tensor
    shape3d: torch.Tensor
    gaze: torch.Tensor

    def __post_init__(self):
        if self.euler.shape[-1] != 3 or self.gaze.shape[-1] != 2:
            raise ConformanceError('Pose parameters need 3 Euler angles and a 2-vector gaze')
        for name in ('euler', 'expression', 'shape3d', 'gaze'):
            if not all_finite(getattr(self, name)):
                raise ConformanceError(f'Pose parameter "{name}" contains non-finite values')

    @classmethod
    def from_values(cls, euler, expression, shape3d, gaze):
        """Builds parameters from plain sequences (float32 tensors)."""
        def as_tensor(values):
            return torch.as_tensor(np.asarray(values, dtype=np.float32))
        return cls(as_tensor(euler), as_tensor(expression), as_tensor(shape3d), as_tensor(gaze))

    @classmethod
    def from_dict(cls, values):
        return cls.from_values(values['euler'], values['expression'], values['shape3d'], values['gaze'])

    def to_dict(self):
        return {name: [float(v) for v in getattr(self, name).detach().cpu().reshape(-1)]
                for name in ('euler', 'expression', 'shape3d', 'gaze')}

    @property
    def expression_dim(self):
        return self.expression.shape[-1]

    @property
    def shape_dim(self):
        return self.shape3d.shape[-1]

    def flatten(self):
        return torch.cat([self.euler, self.expression, self.shape3d, self.gaze], dim=-1)

    @classmethod
    def unflatten(cls, vector, expression_dim, shape_dim):
        euler, expression, shape3d, gaze = torch.split(vector, [3, expression_dim, shape_dim, 2], dim=-1)
        return cls(euler, expression, shape3d, gaze)

    @classmethod
    def stack(cls, params):
        return cls(*(torch.stack([getattr(p, name) for p in params])
                     for name in ('euler', 'expression', 'shape3d', 'gaze')))

    def row(self, index):
        return PoseParams(self.euler[index], self.expression[index], self.shape3d[index], self.gaze[index])


def check_image(images, resolution=None):
    """
    Validates an image tensor and returns it batched as ``[B, 3, R, R]``.

    :param images: ``[3, R, R]`` or ``[B, 3, R, R]`` tensor with values in ``[-1, 1]``.
    :param resolution: Required ``R``; any square size of at least 8 when omitted.
    :raises ConformanceError: On a wrong rank, channel count or size, or non-finite values.
    """
    if not isinstance(images, torch.Tensor):
        raise ConformanceError(f'Expected an image tensor, got {type(images).__name__}')
    batch = images.unsqueeze(0) if images.dim() == 3 else images
    if batch.dim() != 4 or batch.shape[1] != 3 or batch.shape[2] != batch.shape[3] or batch.shape[2] < 8:
        raise ConformanceError(f'Image of shape {tuple(images.shape)} is not a 3xRxR frame')
    if resolution is not None and batch.shape[2] != resolution:
        raise ConformanceError(f'Image resolution {batch.shape[2]} does not match {resolution}')
    if not all_finite(batch):
        raise ConformanceError('Image contains non-finite values')
    return batch


def content_key(image):
    """Provenance key of a single image: a digest of its float32 pixel values."""
    pixels = image.detach().to(device='cpu', dtype=torch.float32).contiguous().numpy()
    return hashlib.sha1(pixels.tobytes()).hexdigest()


@functools.lru_cache(maxsize=8)
def _landmark_model(expression_dim, num_landmarks=NUM_LANDMARKS, seed=LANDMARK_SEED):
    rng = np.random.default_rng(seed)
    template = rng.uniform(-1.0, 1.0, size=(num_landmarks, 3))
    basis = rng.uniform(0.0, 1.0, size=(num_landmarks * 3, expression_dim))
    # Rows sum to one: a uniform expression shift moves every coordinate by the same amount
    basis /= basis.sum(axis=1, keepdims=True)
    return torch.from_numpy(template), torch.from_numpy(basis)


def euler_to_rotation(euler):
    """Rotation matrices ``Rz(roll) @ Ry(yaw) @ Rx(pitch)`` for Euler angles in degrees."""
    yaw, pitch, roll = torch.deg2rad(euler).unbind(dim=-1)
    zeros, ones = torch.zeros_like(yaw), torch.ones_like(yaw)

    def matrix(*rows):
        return torch.stack([torch.stack(row, dim=-1) for row in rows], dim=-2)

    rx = matrix((ones, zeros, zeros), (zeros, torch.cos(pitch), -torch.sin(pitch)),
                (zeros, torch.sin(pitch), torch.cos(pitch)))
    ry = matrix((torch.cos(yaw), zeros, torch.sin(yaw)), (zeros, ones, zeros),
                (-torch.sin(yaw), zeros, torch.cos(yaw)))
    rz = matrix((torch.cos(roll), -torch.sin(roll), zeros), (torch.sin(roll), torch.cos(roll), zeros),
                (zeros, zeros, ones))
    return rz @ ry @ rx


def facial_shape(params):
    """
    Sparse 3D landmark set of the face described by ``params``.

    A fixed template is deformed by the expression coefficients and rotated by the Euler
    angles. Identity geometry coefficients are not used.

    :return: ``[L, 3]`` landmarks, or ``[B, L, 3]`` for batched parameters.
    """
    template, basis = _landmark_model(params.expression_dim)
    template = template.to(dtype=params.expression.dtype, device=params.expression.device)
    basis = basis.to(dtype=params.expression.dtype, device=params.expression.device)
    lead = params.expression.shape[:-1]
    deformed = template + (params.expression @ basis.T).reshape(*lead, NUM_LANDMARKS, 3)
    rotation = euler_to_rotation(params.euler.to(params.expression.dtype))
    return deformed @ rotation.transpose(-1, -2)


def _conv_block(in_channels, out_channels, stride):
    return nn.Sequential(nn.Conv2d(in_channels, out_channels, 3, stride, 1), nn.LeakyReLU(0.2))


class AppearanceEncoder(nn.Module):
    """Fixed-seed convolutional stand-in for the appearance (face recognition) backbone."""

    def __init__(self, seed=11, out_channels=512):
        super().__init__()
        with seeded(seed):
            self.levels = nn.ModuleList([_conv_block(3, 32, 1), _conv_block(32, 64, 2),
                                         _conv_block(64, 128, 2), _conv_block(128, 256, 2)])
            self.head = nn.Conv2d(256, out_channels, 1)

    def level_features(self, images):
        features = []
        x = images
        for level in self.levels:
            x = level(x)
            features.append(x)
        return features

    def forward(self, images):
        x = self.level_features(images)[-1]
        return F.adaptive_avg_pool2d(self.head(x), FEATURE_SIZE)


class PoseEncoder(nn.Module):
    """
    Fixed-seed stand-in for the 3D face model backbone.

    With ``normalize_input`` the per-image mean is removed first, which makes the features
    insensitive to a global brightness shift.
    """

    def __init__(self, seed=12, out_channels=2048, normalize_input=True):
        super().__init__()
        self.normalize_input = normalize_input
        with seeded(seed):
            self.trunk = nn.Sequential(_conv_block(3, 32, 2), _conv_block(32, 64, 2), _conv_block(64, 128, 1))
            self.head = nn.Conv2d(128, out_channels, 1)

    def forward(self, images):
        if self.normalize_input:
            images = images - images.mean(dim=(1, 2, 3), keepdim=True)
        return F.adaptive_avg_pool2d(self.head(self.trunk(images)), FEATURE_SIZE)


class IdentityHead(nn.Module):
    """Embedding head on top of the appearance features; outputs unit vectors."""

    def __init__(self, seed=13, in_channels=512, dim=512):
        super().__init__()
        with seeded(seed):
            self.projection = nn.Linear(in_channels, dim)

    def forward(self, appearance):
        return F.normalize(self.projection(appearance.mean(dim=(2, 3))), dim=1)


class PoseParamExtractor(nn.Module):
    """
    Pose parameter and gaze stand-in.

    Images registered from a synthetic dataset are answered by lookup of their content key
    (oracle mode), returning the parameters they were rendered with. Any other image goes
    through a linear head on pooled pixels, calibrated by ridge regression on registered frames.
    """

    def __init__(self, expression_dim=50, shape_dim=8, pooled_size=8, ridge=1e-2):
        super().__init__()
        self.expression_dim = expression_dim
        self.shape_dim = shape_dim
        self.pooled_size = pooled_size
        self.ridge = ridge
        feature_dim = 3 * pooled_size * pooled_size + 1
        self.register_buffer('head', torch.zeros(feature_dim, 3 + expression_dim + shape_dim + 2))
        self.oracle = {}

    def register(self, image, params):
        if params.expression_dim != self.expression_dim or params.shape_dim != self.shape_dim:
            raise ConformanceError('Registered parameters do not match the extractor dimensions')
        self.oracle[content_key(image)] = params

    def register_frames(self, frames):
        """Registers an iterable of ``(image, PoseParams)`` pairs for oracle lookup."""
        count = 0
        for image, params in frames:
            self.register(image, params)
            count += 1
        logging.info(f'Registered {count} frames for pose oracle lookup')

    def _features(self, images):
        pooled = F.adaptive_avg_pool2d(images, self.pooled_size).flatten(start_dim=1)
        return torch.cat([pooled, torch.ones_like(pooled[:, :1])], dim=1)

    @torch.no_grad()
    def calibrate(self, images, params):
        """Fits the regression head on ``images`` and their ground-truth ``params`` (batched)."""
        features = self._features(check_image(images)).double()
        targets = params.flatten().double().to(features.device)
        gram = features.T @ features + self.ridge * torch.eye(features.shape[1], dtype=torch.float64,
                                                              device=features.device)
        solution = torch.linalg.solve(gram, features.T @ targets)
        self.head.copy_(solution.to(self.head.dtype))
        logging.info(f'Calibrated pose regressor on {features.shape[0]} frames')

    def forward(self, images):
        batch = check_image(images)
        hits = [self.oracle.get(content_key(image)) for image in batch]
        missing = [i for i, hit in enumerate(hits) if hit is None]
        predicted = None
        if missing:
            predicted = self._features(batch[missing]) @ self.head.to(batch.dtype)

        rows, cursor = [], 0
        for hit in hits:
            if hit is None:
                rows.append(predicted[cursor])
                cursor += 1
            else:
                rows.append(hit.flatten().to(dtype=batch.dtype, device=batch.device))
        params = PoseParams.unflatten(torch.stack(rows), self.expression_dim, self.shape_dim)
        params.euler = wrap_degrees(params.euler)
        return params


class LatentInverter(nn.Module):
    """
    Stand-in W+ inversion encoder: mean latent plus small fixed-seed per-row deltas, clamped.
    """

    def __init__(self, num_styles, mean_latent, seed=14, clamp=5.0, delta_scale=0.1):
        super().__init__()
        self.num_styles = num_styles
        self.clamp = clamp
        with seeded(seed):
            self.trunk = nn.Sequential(_conv_block(3, 32, 2), _conv_block(32, 64, 2), _conv_block(64, 128, 2))
            self.delta = nn.Linear(128, num_styles * STYLE_DIM)
            nn.init.normal_(self.delta.weight, std=delta_scale / 128 ** 0.5)
            nn.init.zeros_(self.delta.bias)
        self.register_buffer('mean_latent', mean_latent.detach().clone())

    def forward(self, images):
        pooled = self.trunk(images).mean(dim=(2, 3))
        delta = self.delta(pooled).view(-1, self.num_styles, STYLE_DIM)
        return LatentCode(torch.clamp(self.mean_latent + delta, -self.clamp, self.clamp))


ROLES = ('appearance', 'pose', 'pose_params', 'identity', 'inversion')


@dataclass(frozen=True)
class EncoderManifest:
    """Description of a registered encoder plug-in."""
    role: str
    name: str
    input_resolution: int = None
    output_contract: str = ''


@dataclass(frozen=True)
class EncoderSettings:
    """
    Construction settings shared by all encoder plug-ins.

    ``plugins`` maps each role to the registered name to build; ``seeds`` holds the fixed seeds
    of the stand-ins and is recorded in every run config.
    """
    resolution: int = 32
    expression_dim: int = 50
    shape_dim: int = 8
    identity_dim: int = 512
    normalize_pose_input: bool = True
    latent_clamp: float = 5.0
    seeds: dict = field(default_factory=lambda: {'appearance': 11, 'pose': 12, 'identity': 13, 'inversion': 14})
    plugins: dict = field(default_factory=lambda: {role: 'standin' for role in ROLES})


_REGISTRY = {}


def register_encoder(role, name, input_resolution=None, output_contract=''):
    """
    Decorator that registers ``factory(settings, generator) -> nn.Module`` as a plug-in.

    :raises InvalidConfigError: For an unknown role.
    """
    if role not in ROLES:
        raise InvalidConfigError(f'Unknown encoder role "{role}", expected one of {ROLES}')

    def decorator(factory):
        _REGISTRY[(role, name)] = (EncoderManifest(role, name, input_resolution, output_contract), factory)
        return factory
    return decorator


def available_encoders(role=None):
    """Manifests of all registered plug-ins, optionally for a single role."""
    return [manifest for (plugin_role, _), (manifest, _) in sorted(_REGISTRY.items())
            if role is None or plugin_role == role]


@register_encoder('appearance', 'standin', output_contract='512x7x7 appearance features')
def _standin_appearance(settings, generator):
    return AppearanceEncoder(seed=settings.seeds['appearance'])


@register_encoder('pose', 'standin', output_contract='2048x7x7 pose features')
def _standin_pose(settings, generator):
    return PoseEncoder(seed=settings.seeds['pose'], normalize_input=settings.normalize_pose_input)


@register_encoder('pose_params', 'standin', output_contract='euler/expression/shape3d/gaze')
def _standin_pose_params(settings, generator):
    return PoseParamExtractor(expression_dim=settings.expression_dim, shape_dim=settings.shape_dim)


@register_encoder('identity', 'standin', output_contract='unit-norm identity embedding')
def _standin_identity(settings, generator):
    return IdentityHead(seed=settings.seeds['identity'], dim=settings.identity_dim)


@register_encoder('inversion', 'standin', output_contract='W+ code, one row per style slot')
def _standin_inversion(settings, generator):
    seed = settings.seeds['inversion']
    return LatentInverter(generator.arch.num_styles, generator.mean_latent(seed=seed), seed=seed,
                          clamp=settings.latent_clamp)


class EncoderSuite(nn.Module):
    """The frozen encoders of one pipeline, exposed through role-level operations."""

    def __init__(self, appearance, pose, pose_params, identity, inversion, resolution=None):
        super().__init__()
        self.appearance = appearance
        self.pose = pose
        self.pose_params = pose_params
        self.identity = identity
        self.inversion = inversion
        self.resolution = resolution

    def encode_appearance(self, images):
        return FeatureMap(self.appearance(check_image(images, self.resolution)), FeatureKind.APPEARANCE)

    def encode_pose(self, images):
        return FeatureMap(self.pose(check_image(images, self.resolution)), FeatureKind.POSE)

    def extract_pose_params(self, images):
        return self.pose_params(check_image(images, self.resolution))

    def identity_embedding(self, images):
        return self.identity(self.appearance(check_image(images, self.resolution)))

    def estimate_gaze(self, images):
        return self.extract_pose_params(images).gaze

    def invert(self, images):
        return self.inversion(check_image(images, self.resolution))

    def perceptual_features(self, images):
        """Intermediate appearance-encoder activations used by the perceptual distance."""
        return self.appearance.level_features(check_image(images, self.resolution))


def build_encoder_suite(settings, generator):
    """
    Builds the encoder suite named by ``settings.plugins``.

    :param settings: Encoder settings of the run.
    :type settings: EncoderSettings
    :param generator: The generator whose arch and mean latent the inversion plug-in needs.
    :raises InvalidConfigError: If a role names a plug-in that is not registered.
    """
    modules = {}
    for role in ROLES:
        name = settings.plugins.get(role, 'standin')
        if (role, name) not in _REGISTRY:
            raise InvalidConfigError(f'No "{name}" encoder registered for role "{role}"')
        manifest, factory = _REGISTRY[(role, name)]
        if manifest.input_resolution is not None and manifest.input_resolution != settings.resolution:
            raise InvalidConfigError(f'Encoder "{name}" expects {manifest.input_resolution}px input, '
                                     f'run uses {settings.resolution}px')
        modules[role] = factory(settings, generator)
    return EncoderSuite(resolution=settings.resolution, **modules)
