"""
This module provides the frame datasets used for training, evaluation and benchmarking.

A dataset is a directory with one subdirectory per identity holding pre-aligned square frames.
An optional ``metadata.yaml`` at the top level records the pose parameters a frame was rendered
with, which the pose stand-in answers from in oracle mode.

Synthetic datasets are rendered procedurally: a per-identity face pattern moved and distorted by
the head pose, an expression-driven mouth and brows, and eye marks placed by the gaze.
"""
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
import yaml
from PIL import Image, UnidentifiedImageError

from FACEflow.modules.encoders import PoseParams
from FACEflow.modules.errors import DatasetError

IMAGE_EXTENSIONS = ('.png', '.jpg', '.jpeg')
METADATA_FILE = 'metadata.yaml'


@dataclass(frozen=True, order=True)
class FrameRef:
    """A frame of an identity, by position in the identity's lexicographically sorted frame list."""
    identity: str
    index: int
    name: str = ''


def image_to_tensor(pixels):
    """HxWx3 uint8 array to a float32 ``[3, H, W]`` tensor in [-1, 1]."""
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1))).float() / 127.5 - 1


def tensor_to_image(image):
    """``[3, H, W]`` tensor in [-1, 1] to a PIL image."""
    pixels = ((image.detach().cpu().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return Image.fromarray(pixels.permute(1, 2, 0).numpy())


def read_frame(path):
    """
    Reads an image file as an RGB uint8 array.

    :raises DatasetError: If the file cannot be read or decoded.
    """
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert('RGB'), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetError(f'Failed to read frame {path}: {e}') from e


def write_frame(image, path):
    tensor_to_image(image).save(path, format='PNG')


class FrameDataset:
    """
    Frames grouped by identity, held in memory as uint8 arrays.

    :ivar identities: Identity id to its ordered frame refs.
    :ivar resolution: Common frame size in pixels.
    :ivar metadata: Frame ref to the pose parameters it was rendered with (synthetic sets only).
    """

    def __init__(self, identities, pixels, resolution, metadata=None, root=None):
        self.identities = identities
        self.resolution = resolution
        self.metadata = metadata or {}
        self.root = root
        self._pixels = pixels

    def __len__(self):
        return sum(len(frames) for frames in self.identities.values())

    @property
    def identity_ids(self):
        return sorted(self.identities)

    def frames(self):
        for identity in self.identity_ids:
            yield from self.identities[identity]

    def frame(self, identity, index):
        frames = self.identities.get(identity, [])
        if not 0 <= index < len(frames):
            raise DatasetError(f'No frame {index} for identity "{identity}"')
        return frames[index]

    def contains(self, ref):
        return ref in self._pixels

    def load(self, ref):
        """The frame as a float32 ``[3, R, R]`` tensor in [-1, 1]."""
        if ref not in self._pixels:
            raise DatasetError(f'Frame {ref.identity}/{ref.index} is not part of the dataset')
        return image_to_tensor(self._pixels[ref])

    def load_batch(self, refs):
        return torch.stack([self.load(ref) for ref in refs])

    def pose_params(self, ref):
        return self.metadata.get(ref)

    def pose_frames(self):
        """``(image, PoseParams)`` pairs for every frame with recorded parameters."""
        for ref in self.frames():
            if ref in self.metadata:
                yield self.load(ref), self.metadata[ref]

    def save(self, directory):
        """Writes the frames as PNG files plus ``metadata.yaml`` when parameters are known."""
        metadata = {}
        for ref in self.frames():
            os.makedirs(os.path.join(directory, ref.identity), exist_ok=True)
            Image.fromarray(self._pixels[ref]).save(
                os.path.join(directory, ref.identity, ref.name), format='PNG')
            if ref in self.metadata:
                metadata.setdefault(ref.identity, {})[ref.name] = self.metadata[ref].to_dict()
        if metadata:
            with open(os.path.join(directory, METADATA_FILE), 'w') as file_handle:
                yaml.safe_dump(metadata, file_handle, sort_keys=True)
        logging.info(f'Wrote {len(self)} frames of {len(self.identities)} identities to {directory}')


def _read_metadata(path, identities):
    try:
        with open(path, 'r') as file_handle:
            raw = yaml.safe_load(file_handle) or {}
    except (OSError, yaml.YAMLError) as e:
        raise DatasetError(f'Failed to read {path}: {e}') from e

    metadata = {}
    for identity, frames in identities.items():
        for ref in frames:
            values = raw.get(identity, {}).get(ref.name)
            if values is not None:
                try:
                    metadata[ref] = PoseParams.from_dict(values)
                except (KeyError, TypeError, ValueError) as e:
                    raise DatasetError(f'Invalid pose metadata for {identity}/{ref.name}: {e}') from e
    return metadata


def ingest(path):
    """
    Reads a directory of per-identity frame subdirectories.

    Identities and frames are ordered lexicographically, so ingesting the same directory twice
    gives the same dataset. The directory is never modified.

    :param path: Dataset root.
    :type path: str
    :return: The dataset.
    :rtype: FrameDataset
    :raises DatasetError: If the directory is missing or holds no frames, a frame cannot be read,
        or frames are not square and of one common resolution.
    """
    if not os.path.isdir(path):
        raise DatasetError(f'Dataset directory {path} does not exist')

    identities, pixels, resolution = {}, {}, None
    for identity in sorted(os.listdir(path)):
        identity_dir = os.path.join(path, identity)
        if not os.path.isdir(identity_dir):
            continue
        names = sorted(name for name in os.listdir(identity_dir) if name.lower().endswith(IMAGE_EXTENSIONS))
        if not names:
            logging.warning(f'Identity directory {identity_dir} contains no frames, skipping it')
            continue
        frames = []
        for index, name in enumerate(names):
            array = read_frame(os.path.join(identity_dir, name))
            height, width = array.shape[:2]
            if height != width:
                raise DatasetError(f'Frame {identity}/{name} is {width}x{height}, frames must be square')
            if resolution is None:
                resolution = height
            elif height != resolution:
                raise DatasetError(f'Frame {identity}/{name} has resolution {height}, dataset uses {resolution}')
            ref = FrameRef(identity, index, name)
            pixels[ref] = array
            frames.append(ref)
        identities[identity] = frames

    if not identities:
        raise DatasetError(f'Dataset directory {path} contains no frames')

    metadata_path = os.path.join(path, METADATA_FILE)
    metadata = _read_metadata(metadata_path, identities) if os.path.isfile(metadata_path) else {}
    logging.info(f'Ingested {len(pixels)} frames of {len(identities)} identities from {path}')
    return FrameDataset(identities, pixels, resolution, metadata, root=path)


def _identity_traits(rng, shape_dim):
    return {
        'shape3d': rng.normal(0.0, 1.0, size=shape_dim),
        'skin': rng.uniform(-0.2, 0.7, size=3),
        'background': rng.uniform(-0.9, -0.3, size=3),
        'frequencies': rng.uniform(2.0, 6.0, size=2),
        'phase': rng.uniform(0.0, 2 * np.pi, size=2),
    }


def _frame_params(rng, expression_dim, shape3d):
    return PoseParams.from_values(
        euler=[rng.uniform(-40, 40), rng.uniform(-25, 25), rng.uniform(-20, 20)],
        expression=rng.uniform(0.0, 1.0, size=expression_dim),
        shape3d=shape3d,
        gaze=rng.uniform(-0.4, 0.4, size=2),
    )


def render_face(traits, params, resolution):
    """
    Renders one face as an HxWx3 uint8 array.

    :param traits: Identity traits (geometry, colors, texture frequencies).
    :param params: Head pose, expression and gaze of the frame.
    :type params: PoseParams
    :param resolution: Output size in pixels.
    """
    yaw, pitch, roll = np.deg2rad(params.euler.numpy().astype(np.float64))
    expression = params.expression.numpy().astype(np.float64)
    gaze = params.gaze.numpy().astype(np.float64)
    shape3d = traits['shape3d']

    coords = (np.arange(resolution) + 0.5) / resolution * 2 - 1
    v, u = np.meshgrid(coords, coords, indexing='ij')
    # Head rotation: roll turns the frame, yaw and pitch move and foreshorten the face
    cu, cv = 0.35 * np.sin(yaw), 0.35 * np.sin(pitch)
    x = (np.cos(roll) * (u - cu) + np.sin(roll) * (v - cv)) / max(np.cos(yaw), 0.3)
    y = (-np.sin(roll) * (u - cu) + np.cos(roll) * (v - cv)) / max(np.cos(pitch), 0.3)

    width = 0.55 + 0.05 * np.tanh(shape3d[0])
    height = 0.7 + 0.05 * np.tanh(shape3d[1 % len(shape3d)])
    face = ((x / width) ** 2 + (y / height) ** 2 <= 1.0).astype(np.float64)

    texture = 0.15 * np.sin(traits['frequencies'][0] * np.pi * x + traits['phase'][0]) \
        * np.cos(traits['frequencies'][1] * np.pi * y + traits['phase'][1])
    image = np.empty((resolution, resolution, 3))
    for channel in range(3):
        image[..., channel] = np.where(face > 0, traits['skin'][channel] + texture, traits['background'][channel])

    halves = np.array_split(expression, 2)
    mouth_open = 0.03 + 0.12 * float(halves[0].mean())
    brow_raise = 0.1 * float(halves[1].mean()) if len(halves[1]) else 0.0

    features = np.zeros_like(face)
    for side in (-1, 1):
        eye = ((x - side * 0.22) / 0.12) ** 2 + ((y + 0.2) / 0.07) ** 2 <= 1.0
        pupil = ((x - side * 0.22 - 0.08 * np.sin(gaze[1])) / 0.05) ** 2 \
            + ((y + 0.2 - 0.05 * np.sin(gaze[0])) / 0.05) ** 2 <= 1.0
        brow = (np.abs(x - side * 0.22) <= 0.13) & (np.abs(y + 0.36 + brow_raise) <= 0.025)
        features = np.where(eye, 0.9, features)
        features = np.where(pupil, -1.7, features)
        features = np.where(brow, -1.2, features)
    mouth = (x / 0.22) ** 2 + ((y - 0.35) / mouth_open) ** 2 <= 1.0
    features = np.where(mouth, -1.0, features)

    image = image + (face * features)[..., None]
    return np.round((np.clip(image, -1, 1) + 1) * 127.5).astype(np.uint8)


def generate_synthetic_dataset(num_ids, frames_per_id, resolution, seed, expression_dim=50, shape_dim=8):
    """
    Renders a synthetic dataset with ground-truth pose parameters for every frame.

    The same arguments always give bitwise-identical frames. Pose parameters are stored as the
    values the quantized frames were rendered from.

    :param num_ids: Number of identities.
    :param frames_per_id: Frames per identity.
    :param resolution: Frame size in pixels.
    :param seed: Seed of all random choices.
    :return: The dataset, held in memory.
    :rtype: FrameDataset
    :raises DatasetError: For non-positive counts or resolution.
    """
    if min(num_ids, frames_per_id, resolution) < 1:
        raise DatasetError('Synthetic datasets need positive identity, frame and resolution counts')

    identities, pixels, metadata = {}, {}, {}
    for identity_index in range(num_ids):
        identity = f'id{identity_index:03d}'
        traits = _identity_traits(np.random.default_rng([seed, identity_index]), shape_dim)
        frames = []
        for frame_index in range(frames_per_id):
            params = _frame_params(np.random.default_rng([seed, identity_index, frame_index + 1]),
                                   expression_dim, traits['shape3d'])
            ref = FrameRef(identity, frame_index, f'{frame_index:04d}.png')
            pixels[ref] = render_face(traits, params, resolution)
            metadata[ref] = params
            frames.append(ref)
        identities[identity] = frames

    logging.info(f'Generated {num_ids * frames_per_id} synthetic frames of {num_ids} identities '
                 f'at {resolution}x{resolution} (seed {seed})')
    return FrameDataset(identities, pixels, resolution, metadata)
