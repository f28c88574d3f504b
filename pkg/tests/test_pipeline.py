import pytest
import torch

from FACEflow.app import build_reenactor
from FACEflow.modules.errors import ConformanceError
from FACEflow.modules.fusion import ReenactmentModule
from FACEflow.modules.generator import Generator, scaled_arch
from FACEflow.modules.hypernet import Hypernetwork
from FACEflow.modules.pipeline import Reenactor
from FACEflow.modules.trainer import parameter_digest


def test_zero_offsets_reproduce_inversion(desk_run_config):
    model = build_reenactor(desk_run_config)
    rng = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(20):
            source, target = torch.rand(2, 3, 32, 32, generator=rng) * 2 - 1
            assert torch.allclose(model.reenact(source, target), model.reconstruct(source), atol=1e-6, rtol=0)


def test_output_carries_intermediates(tiny_reenactor, tiny_dataset):
    frames = list(tiny_dataset.frames())[:3]
    output = tiny_reenactor(tiny_dataset.load(frames[0]), tiny_dataset.load_batch(frames))
    assert output.images.shape == (3, 3, 8, 8)
    assert output.fused.data.shape == (3, 512, 7, 7)
    assert set(output.offsets.entries) == set(tiny_reenactor.generator.arch.controlled_indices)
    assert output.latent.styles.shape[0] == 3


def test_only_fusion_and_hypernet_train(tiny_reenactor):
    trainable = {id(p) for p in tiny_reenactor.trainable_parameters()}
    assert trainable == {id(p) for p in tiny_reenactor.parameters() if p.requires_grad}
    assert all(not p.requires_grad for p in tiny_reenactor.generator.parameters())
    assert all(not p.requires_grad for p in tiny_reenactor.encoders.parameters())


def test_frozen_modules_stay_in_eval(tiny_reenactor):
    tiny_reenactor.train()
    assert tiny_reenactor.fusion.training
    assert not tiny_reenactor.generator.training
    assert not tiny_reenactor.encoders.training


def test_reenactment_does_not_touch_frozen_weights(tiny_reenactor, tiny_dataset):
    before = parameter_digest(tiny_reenactor.generator)
    frames = list(tiny_dataset.frames())[:2]
    tiny_reenactor.reenact(tiny_dataset.load(frames[0]), tiny_dataset.load(frames[1]))
    assert parameter_digest(tiny_reenactor.generator) == before


def test_mismatched_batches_are_rejected(tiny_reenactor):
    with pytest.raises(ConformanceError):
        tiny_reenactor.reenact(torch.zeros(2, 3, 8, 8), torch.zeros(3, 3, 8, 8))


def test_wrong_resolution_is_rejected(tiny_reenactor):
    with pytest.raises(ConformanceError):
        tiny_reenactor.reenact(torch.zeros(3, 16, 16), torch.zeros(3, 16, 16))


def test_hypernet_must_match_generator(tiny_reenactor):
    other = Hypernetwork(scaled_arch(16, 4), shared_hidden=8, specific_hidden=8)
    with pytest.raises(ConformanceError):
        Reenactor(Generator(scaled_arch(8, 4), mapping_layers=2), tiny_reenactor.encoders, ReenactmentModule(), other)
