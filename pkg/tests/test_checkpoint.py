import json
import os

import pytest
import torch

from FACEflow.modules.checkpoint import MANIFEST_FILE, load_checkpoint, restore_model, save_checkpoint
from FACEflow.modules.errors import CheckpointError
from FACEflow.modules.fusion import ReenactmentModule


def test_model_tensors_survive(tmp_path):
    module = torch.nn.Linear(4, 3)
    save_checkpoint(str(tmp_path / 'ckpt'), module.state_dict(), run_config={'name': 'x'},
                    trainer_state={'step': 7})
    checkpoint = load_checkpoint(str(tmp_path / 'ckpt'))
    assert checkpoint.run_config == {'name': 'x'}
    assert checkpoint.trainer_state == {'step': 7}
    assert checkpoint.optimizer_state is None

    restored = restore_model(torch.nn.Linear(4, 3), checkpoint)
    assert torch.equal(restored.weight, module.weight)
    assert torch.equal(restored.bias, module.bias)


def test_optimizer_moments_survive(tmp_path):
    module = torch.nn.Linear(4, 3)
    optimizer = torch.optim.Adam(module.parameters(), lr=1e-3)
    module(torch.ones(2, 4)).sum().backward()
    optimizer.step()
    save_checkpoint(str(tmp_path / 'ckpt'), module.state_dict(), optimizer_state=optimizer.state_dict())

    fresh = torch.optim.Adam(module.parameters(), lr=1e-3)
    fresh.load_state_dict(load_checkpoint(str(tmp_path / 'ckpt')).optimizer_state)
    for index, state in optimizer.state_dict()['state'].items():
        loaded = fresh.state_dict()['state'][index]
        assert torch.equal(loaded['exp_avg'], state['exp_avg'])
        assert torch.equal(loaded['exp_avg_sq'], state['exp_avg_sq'])


def test_existing_checkpoint_is_replaced(tmp_path):
    directory = str(tmp_path / 'ckpt')
    save_checkpoint(directory, {'a': torch.zeros(2)})
    save_checkpoint(directory, {'a': torch.ones(2)})
    assert torch.equal(load_checkpoint(directory).model_state['a'], torch.ones(2))
    assert sorted(os.listdir(tmp_path)) == ['ckpt']


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path))


def test_truncated_blob(tmp_path):
    directory = tmp_path / 'ckpt'
    save_checkpoint(str(directory), {'a': torch.zeros(8)})
    with open(directory / MANIFEST_FILE) as file_handle:
        blob = json.load(file_handle)['tensors'][0]['file']
    (directory / blob).write_bytes(b'\x00' * 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(directory))


def test_mismatched_model_is_rejected(tmp_path):
    save_checkpoint(str(tmp_path / 'ckpt'), torch.nn.Linear(4, 3).state_dict())
    with pytest.raises(CheckpointError):
        restore_model(ReenactmentModule(), load_checkpoint(str(tmp_path / 'ckpt')))
