import pytest
import torch

from FACEflow.modules.errors import ConformanceError, InvalidConfigError
from FACEflow.modules.generator import Generator, LayerKind, LatentCode, WeightOffsets, apply_offsets, canonical_arch, \
    scaled_arch, synthesize


def test_canonical_arch_layer_table():
    arch = canonical_arch()
    assert len(arch.layers) == 20
    assert len(arch.conv_layers) == 13
    assert arch.num_styles == 14

    first, last = arch.layers[0], arch.layers[19]
    assert (first.name, first.resolution, first.kernel_shape) == ('Conv1', 4, (512, 512, 3, 3))
    assert (last.name, last.resolution, last.kernel_shape) == ('ToRGB7', 256, (3, 64, 1, 1))


def test_scaled_arch_recovers_canonical():
    assert scaled_arch(256, 512) == canonical_arch()


def test_desk_arch_is_capped(desk_arch):
    kinds = [spec.kind for spec in desk_arch.layers]
    assert len(kinds) == 11
    assert kinds.count(LayerKind.CONV) == 7
    assert kinds.count(LayerKind.TO_RGB) == 4
    assert desk_arch.max_channels == 64
    assert desk_arch.num_styles == 8


@pytest.mark.parametrize('resolution', [7, 12, 512])
def test_unsupported_resolution(resolution):
    with pytest.raises(InvalidConfigError):
        scaled_arch(resolution, 64)


def test_apply_offsets_rule(tiny_arch):
    index = tiny_arch.controlled_indices[0]
    shape = tiny_arch.layers[index].kernel_shape
    base = {spec.index: torch.full(spec.kernel_shape, 2.0) for spec in tiny_arch.layers}

    updated = apply_offsets(base, WeightOffsets({index: torch.full(shape, 0.5)}), tiny_arch)
    assert torch.equal(updated[index], torch.full(shape, 3.0))
    assert torch.equal(base[index], torch.full(shape, 2.0))

    annihilated = apply_offsets(base, WeightOffsets({index: torch.full(shape, -1.0)}))
    assert torch.equal(annihilated[index], torch.zeros(shape))

    unchanged = apply_offsets(base, WeightOffsets.zeros(tiny_arch))
    assert all(torch.equal(unchanged[i], base[i]) for i in base)


def test_apply_offsets_rejects_uncontrolled_layer(tiny_arch):
    to_rgb = next(spec for spec in tiny_arch.layers if spec.kind is LayerKind.TO_RGB)
    base = {spec.index: torch.ones(spec.kernel_shape) for spec in tiny_arch.layers}
    with pytest.raises(ConformanceError):
        apply_offsets(base, WeightOffsets({to_rgb.index: torch.zeros(to_rgb.kernel_shape)}), tiny_arch)


def test_apply_offsets_rejects_wrong_shape(tiny_arch):
    index = tiny_arch.controlled_indices[0]
    base = {spec.index: torch.ones(spec.kernel_shape) for spec in tiny_arch.layers}
    with pytest.raises(ConformanceError):
        apply_offsets(base, WeightOffsets({index: torch.zeros(1, 1, 3, 3)}))


def test_synthesize_is_deterministic_and_bounded(tiny_generator):
    w = tiny_generator.sample_latent(torch.randn(2, 512, generator=torch.Generator().manual_seed(1)))
    weights = tiny_generator.base_weights()
    first, second = synthesize(tiny_generator, weights, w), synthesize(tiny_generator, weights, w)
    assert first.shape == (2, 3, 8, 8)
    assert torch.equal(first, second)
    assert torch.isfinite(first).all()
    assert first.abs().max() <= 1


def test_zero_offsets_match_base_weights(desk_arch):
    generator = Generator(desk_arch, mapping_layers=2)
    w = generator.sample_latent(torch.randn(3, 512, generator=torch.Generator().manual_seed(2)))
    base = synthesize(generator, generator.base_weights(), w)
    shifted = synthesize(generator, apply_offsets(generator.base_weights(), WeightOffsets.zeros(desk_arch)), w)
    assert base.shape == (3, 3, 32, 32)
    assert torch.allclose(base, shifted, atol=1e-6, rtol=0)


def test_generator_seed_controls_parameters(tiny_arch):
    a, b = Generator(tiny_arch, mapping_layers=2, seed=4), Generator(tiny_arch, mapping_layers=2, seed=4)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_latent_code_validation(tiny_generator, tiny_arch):
    with pytest.raises(ConformanceError):
        tiny_generator(LatentCode(torch.zeros(tiny_arch.num_styles + 1, 512)))


def test_spatial_spread_of_repeated_offsets(tiny_arch):
    offsets = WeightOffsets({spec.index: torch.randn(spec.out_channels, spec.in_channels, 1, 1)
                             .repeat(1, 1, 3, 3) for spec in tiny_arch.conv_layers})
    assert offsets.validate(tiny_arch).spatial_spread() == 0.0


def test_offset_leaves_earlier_layers_untouched(tiny_generator, tiny_arch):
    w = tiny_generator.sample_latent(torch.randn(1, 512, generator=torch.Generator().manual_seed(3)))
    layer = tiny_arch.controlled_indices[-1]
    spec = tiny_arch.layers[layer]
    offset = torch.rand(spec.kernel_shape, generator=torch.Generator().manual_seed(5))
    _, base = synthesize(tiny_generator, tiny_generator.base_weights(), w, return_activations=True)
    perturbed_weights = apply_offsets(tiny_generator.base_weights(), WeightOffsets({layer: offset}))
    _, perturbed = synthesize(tiny_generator, perturbed_weights, w, return_activations=True)
    assert len(base) == len(tiny_arch.layers)
    assert all(torch.equal(a, b) for a, b in zip(base[:layer], perturbed[:layer]))
    assert not torch.equal(base[layer], perturbed[layer])


def test_noise_is_fixed_by_seed(tiny_arch):
    a = Generator(tiny_arch, mapping_layers=2, use_noise=True, seed=6)
    b = Generator(tiny_arch, mapping_layers=2, use_noise=True, seed=6)
    noisy = [layer for layer in a.layers if layer.spec.kind is LayerKind.CONV]
    assert noisy and all(layer.noise is not None for layer in noisy)
    assert all(torch.equal(x.noise, y.noise) for x, y in zip(a.layers, b.layers) if x.noise is not None)
    w = a.sample_latent(torch.randn(2, 512, generator=torch.Generator().manual_seed(4)))
    assert torch.equal(a(w), a(w))
    assert torch.equal(a(w), b(w))
    other = Generator(tiny_arch, mapping_layers=2, use_noise=True, seed=7)
    assert not torch.equal(noisy[0].noise, other.layers[noisy[0].spec.index].noise)
