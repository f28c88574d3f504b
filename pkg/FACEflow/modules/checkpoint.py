"""
This module reads and writes checkpoint directories.

A checkpoint is a directory holding ``manifest.json`` and one raw little-endian float32 blob per
tensor. The manifest lists every tensor (name, shape, dtype, blob file) and carries the run
config and trainer state as plain JSON, so a model can be rebuilt from the directory alone.
Directories are written next to their destination and moved into place when complete.
"""
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch

from FACEflow.modules.errors import CheckpointError

MANIFEST_FILE = 'manifest.json'
BLOB_DTYPE = '<f4'
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict = None
    run_config: dict = field(default_factory=dict)
    trainer_state: dict = field(default_factory=dict)


def _optimizer_tensors(optimizer_state):
    tensors = {}
    for index, values in optimizer_state['state'].items():
        for key, value in values.items():
            tensors[f'optimizer.{index}.{key}'] = torch.as_tensor(value)
    return tensors


def save_checkpoint(directory, model_state, run_config=None, trainer_state=None, optimizer_state=None):
    """
    Writes a checkpoint directory, replacing an existing one only once the new one is complete.

    :param directory: Destination directory.
    :type directory: str
    :param model_state: Tensors to store, usually a module ``state_dict``.
    :type model_state: dict[str, torch.Tensor]
    :param run_config: Plain-dict run configuration.
    :param trainer_state: JSON-serializable trainer counters and RNG state.
    :param optimizer_state: An optimizer ``state_dict``; its moments are stored as blobs.
    :raises CheckpointError: If the directory cannot be written.
    """
    tensors = {f'model.{name}': tensor for name, tensor in model_state.items()}
    param_groups = None
    if optimizer_state is not None:
        tensors.update(_optimizer_tensors(optimizer_state))
        param_groups = optimizer_state['param_groups']

    parent = os.path.dirname(os.path.abspath(directory))
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix='.checkpoint-', dir=parent)
    try:
        entries = []
        for position, (name, tensor) in enumerate(tensors.items()):
            blob = f'{position:05d}.bin'
            array = tensor.detach().to(device='cpu', dtype=torch.float32).numpy().astype(BLOB_DTYPE)
            array.tofile(os.path.join(staging, blob))
            entries.append({'name': name, 'shape': list(array.shape), 'dtype': BLOB_DTYPE, 'file': blob})

        manifest = {'format_version': FORMAT_VERSION, 'tensors': entries,
                    'run_config': run_config or {}, 'trainer_state': trainer_state or {},
                    'optimizer_param_groups': param_groups}
        with open(os.path.join(staging, MANIFEST_FILE), 'w') as file_handle:
            json.dump(manifest, file_handle, indent=2)

        previous = None
        if os.path.exists(directory):
            previous = tempfile.mkdtemp(prefix='.previous-', dir=parent)
            os.rmdir(previous)
            os.replace(directory, previous)
        os.replace(staging, directory)
        if previous:
            shutil.rmtree(previous)
    except OSError as e:
        shutil.rmtree(staging, ignore_errors=True)
        raise CheckpointError(f'Failed to write checkpoint {directory}: {e}') from e

    logging.info(f'Wrote checkpoint {directory} ({len(entries)} tensors)')


def load_checkpoint(directory):
    """
    Reads a checkpoint directory.

    :return: Model tensors, the optimizer state (when one was stored), run config and trainer state.
    :rtype: Checkpoint
    :raises CheckpointError: If the manifest or a blob is missing or a blob does not match its shape.
    """
    manifest_path = os.path.join(directory, MANIFEST_FILE)
    try:
        with open(manifest_path, 'r') as file_handle:
            manifest = json.load(file_handle)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f'Failed to read checkpoint manifest {manifest_path}: {e}') from e

    model_state, optimizer_tensors = {}, {}
    for entry in manifest.get('tensors', []):
        path = os.path.join(directory, entry['file'])
        try:
            array = np.fromfile(path, dtype=entry.get('dtype', BLOB_DTYPE))
        except OSError as e:
            raise CheckpointError(f'Failed to read tensor blob {path}: {e}') from e
        if array.size != int(np.prod(entry['shape'], dtype=np.int64)):
            raise CheckpointError(f'Blob {entry["file"]} holds {array.size} values, '
                                  f'manifest expects shape {entry["shape"]}')
        tensor = torch.from_numpy(array.astype(np.float32).reshape(entry['shape']))
        prefix, _, name = entry['name'].partition('.')
        if prefix == 'model':
            model_state[name] = tensor
        else:
            optimizer_tensors[name] = tensor

    optimizer_state = None
    if manifest.get('optimizer_param_groups') is not None:
        state = {}
        for name, tensor in optimizer_tensors.items():
            index, key = name.split('.', 1)
            state.setdefault(int(index), {})[key] = tensor
        optimizer_state = {'state': state, 'param_groups': manifest['optimizer_param_groups']}

    return Checkpoint(model_state, optimizer_state, manifest.get('run_config', {}),
                      manifest.get('trainer_state', {}))


def restore_model(model, checkpoint):
    """
    Loads the checkpoint's tensors into ``model`` in the model's own dtype.

    :raises CheckpointError: If the tensor set does not match the model.
    """
    own = model.state_dict()
    missing = sorted(set(own) - set(checkpoint.model_state))
    unexpected = sorted(set(checkpoint.model_state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f'Checkpoint does not match the model (missing {missing[:5]}, '
                              f'unexpected {unexpected[:5]})')
    model.load_state_dict({name: tensor.to(own[name].dtype) for name, tensor in checkpoint.model_state.items()})
    return model
