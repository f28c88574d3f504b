"""
This module implements the StyleGAN2-style synthesis network that the hypernetwork steers.

The generator is described by an explicit layer table (:class:`GeneratorArch`). A forward pass
can run on a replacement set of convolution kernels, which is how the per-pair weight offsets
are applied without ever touching the stored parameters.

Classes:
    LayerSpec, GeneratorArch: the layer table.
    LatentCode, WeightOffsets: the inputs a forward pass is steered with.
    Generator: mapping network, constant input and one modulated layer per table row.

Functions:
    canonical_arch, scaled_arch: build layer tables.
    apply_offsets: the multiplicative offset rule.
    synthesize: run the generator on explicit kernels.
"""
import math
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn
from torch.nn import functional as F

from FACEflow.modules.errors import ConformanceError, InvalidConfigError

STYLE_DIM = 512
BASE_RESOLUTION = 4
SUPPORTED_RESOLUTIONS = (8, 16, 32, 64, 128, 256)

# Channel schedule of the 256x256 generator before a cap is applied
CANONICAL_CHANNELS = {4: 512, 8: 512, 16: 512, 32: 512, 64: 256, 128: 128, 256: 64}


@contextmanager
def seeded(seed):
    """Runs the block with the global torch RNG seeded, restoring the previous state afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def all_finite(tensor):
    """Finite-check that is skipped for shape-only tensors on the meta device."""
    if tensor.device.type == 'meta':
        return True
    return bool(torch.isfinite(tensor).all())


class LayerKind(str, Enum):
    CONV = 'Conv'
    TO_RGB = 'ToRGB'


@dataclass(frozen=True)
class LayerSpec:
    """
    One row of the generator layer table.

    :ivar index: Position of the layer in the table.
    :ivar name: Display name such as ``Conv3`` or ``ToRGB2``.
    :ivar kind: Either a 3x3 convolution or a 1x1 ToRGB projection.
    :ivar resolution: Spatial size the layer produces.
    :ivar out_channels: Output channels of the kernel.
    :ivar in_channels: Input channels of the kernel.
    :ivar kernel_size: Spatial kernel size ``k`` (kernel is ``k x k``).
    :ivar style_index: Row of the W+ code that modulates this layer.
    :ivar upsample: Whether the layer doubles the resolution of its input first.
    """
    index: int
    name: str
    kind: LayerKind
    resolution: int
    out_channels: int
    in_channels: int
    kernel_size: int
    style_index: int = 0
    upsample: bool = False

    def __post_init__(self):
        if self.kind is LayerKind.TO_RGB and (self.kernel_size != 1 or self.out_channels != 3):
            raise InvalidConfigError(f'{self.name}: ToRGB layers must be 3x{self.in_channels}x1x1')
        if self.kind is LayerKind.CONV and self.kernel_size != 3:
            raise InvalidConfigError(f'{self.name}: Conv layers must use 3x3 kernels')

    @property
    def kernel_shape(self):
        return self.out_channels, self.in_channels, self.kernel_size, self.kernel_size

    @property
    def is_controlled(self):
        return self.kind is LayerKind.CONV


@dataclass(frozen=True)
class GeneratorArch:
    """Ordered layer table of a generator together with its base and output resolution."""
    layers: tuple
    base_resolution: int = BASE_RESOLUTION
    output_resolution: int = 256

    def __post_init__(self):
        previous = self.base_resolution
        for position, spec in enumerate(self.layers):
            if spec.index != position:
                raise InvalidConfigError(f'Layer {spec.name} has index {spec.index}, expected {position}')
            if spec.resolution < previous or spec.resolution not in (previous, 2 * previous):
                raise InvalidConfigError(f'Layer {spec.name} breaks the resolution doubling rule')
            previous = spec.resolution
        if previous != self.output_resolution:
            raise InvalidConfigError(f'Layer table ends at {previous}, not {self.output_resolution}')

    @property
    def conv_layers(self):
        return tuple(spec for spec in self.layers if spec.kind is LayerKind.CONV)

    @property
    def controlled_indices(self):
        return tuple(spec.index for spec in self.layers if spec.is_controlled)

    @property
    def num_styles(self):
        return max(spec.style_index for spec in self.layers) + 1

    @property
    def max_channels(self):
        return max(spec.out_channels for spec in self.conv_layers)

    def describe(self):
        """Returns the layer table as printable rows."""
        return [f'{spec.index:>3}  {spec.name:<7} {spec.resolution}x{spec.resolution}  '
                + 'x'.join(str(dim) for dim in spec.kernel_shape)
                for spec in self.layers]


@dataclass
class LatentCode:
    """
    A W+ code: one style vector per style slot of the generator.

    ``styles`` is ``[num_styles, 512]`` for a single image or ``[B, num_styles, 512]`` for a batch.
    """
    styles: torch.Tensor

    @property
    def num_rows(self):
        return self.styles.shape[-2]

    def validate(self, arch):
        if self.styles.dim() not in (2, 3) or tuple(self.styles.shape[-2:]) != (arch.num_styles, STYLE_DIM):
            raise ConformanceError(f'Latent code of shape {tuple(self.styles.shape)} does not match '
                                   f'{arch.num_styles} style rows of width {STYLE_DIM}')
        return self


@dataclass
class WeightOffsets:
    """
    Multiplicative offsets for the controlled layers, keyed by layer index.

    Each entry has the layer's kernel shape, optionally with a leading batch dimension.
    """
    entries: dict

    @classmethod
    def zeros(cls, arch, batch_size=None):
        lead = () if batch_size is None else (batch_size,)
        return cls({spec.index: torch.zeros(lead + spec.kernel_shape) for spec in arch.conv_layers})

    def validate(self, arch):
        controlled = set(arch.controlled_indices)
        for index, offset in self.entries.items():
            if index not in controlled:
                raise ConformanceError(f'Layer {index} is not a controlled convolution layer')
            expected = arch.layers[index].kernel_shape
            if offset.dim() not in (4, 5) or tuple(offset.shape[-4:]) != expected:
                raise ConformanceError(f'Offset for layer {index} has shape {tuple(offset.shape)}, '
                                       f'expected {expected}')
        return self

    def spatial_spread(self):
        """Largest difference between spatial positions of any (out, in) offset; 0 for repeated 1x1 offsets."""
        spread = 0.0
        for offset in self.entries.values():
            flat = offset.flatten(start_dim=-2)
            spread = max(spread, float((flat.amax(dim=-1) - flat.amin(dim=-1)).abs().max()))
        return spread


def scaled_arch(output_resolution, channel_cap=512):
    """
    Builds the layer table for a given output resolution with channels clamped to ``channel_cap``.

    The table follows the 256x256 StyleGAN2 structure: a 4x4 block (Conv, ToRGB) followed by one
    (Conv, Conv, ToRGB) block per resolution doubling. ``scaled_arch(256, 512)`` is the canonical table.

    :param output_resolution: Output size in pixels, one of 8, 16, 32, 64, 128 or 256.
    :type output_resolution: int
    :param channel_cap: Upper bound on every layer's channel count.
    :type channel_cap: int
    :return: The layer table.
    :rtype: GeneratorArch
    :raises InvalidConfigError: For unsupported resolutions or a non-positive channel cap.
    """
    if output_resolution not in SUPPORTED_RESOLUTIONS:
        raise InvalidConfigError(f'Unsupported output resolution {output_resolution}, '
                                 f'expected a power of two in {SUPPORTED_RESOLUTIONS}')
    if int(channel_cap) < 1:
        raise InvalidConfigError(f'Channel cap must be positive, got {channel_cap}')

    layers = []

    def add(kind, resolution, out_channels, in_channels, style_index, upsample=False):
        number = sum(1 for spec in layers if spec.kind is kind) + 1
        layers.append(LayerSpec(index=len(layers), name=f'{kind.value}{number}', kind=kind,
                                resolution=resolution, out_channels=out_channels,
                                in_channels=in_channels,
                                kernel_size=3 if kind is LayerKind.CONV else 1,
                                style_index=style_index, upsample=upsample))

    channels = min(CANONICAL_CHANNELS[BASE_RESOLUTION], channel_cap)
    add(LayerKind.CONV, BASE_RESOLUTION, channels, channels, 0)
    add(LayerKind.TO_RGB, BASE_RESOLUTION, 3, channels, 1)

    resolution, block = BASE_RESOLUTION, 0
    while resolution < output_resolution:
        resolution *= 2
        block += 1
        out_channels = min(CANONICAL_CHANNELS[resolution], channel_cap)
        add(LayerKind.CONV, resolution, out_channels, channels, 2 * block - 1, upsample=True)
        add(LayerKind.CONV, resolution, out_channels, out_channels, 2 * block)
        add(LayerKind.TO_RGB, resolution, 3, out_channels, 2 * block + 1)
        channels = out_channels

    return GeneratorArch(layers=tuple(layers), base_resolution=BASE_RESOLUTION,
                         output_resolution=output_resolution)


def canonical_arch():
    """The 256x256 generator: 20 layers, 13 of them controlled convolutions."""
    return scaled_arch(256, 512)


def modulated_conv2d(x, styles, kernel, demodulate=True):
    """
    Style-modulated convolution with optional demodulation, one kernel per sample.

    :param x: Input activations ``[B, C_in, H, W]``.
    :param styles: Per-sample input-channel scales ``[B, C_in]``.
    :param kernel: ``[C_out, C_in, k, k]`` shared by the batch or ``[B, C_out, C_in, k, k]``.
    :param demodulate: Normalize each output filter to unit norm after modulation.
    :return: ``[B, C_out, H, W]``.
    """
    batch, in_channels, height, width = x.shape
    if kernel.dim() == 4:
        kernel = kernel.unsqueeze(0).expand(batch, -1, -1, -1, -1)
    if kernel.shape[0] != batch:
        raise ConformanceError(f'Kernel batch {kernel.shape[0]} does not match input batch {batch}')
    out_channels, kernel_size = kernel.shape[1], kernel.shape[-1]

    weight = kernel * styles.view(batch, 1, in_channels, 1, 1)
    if demodulate:
        weight = weight * torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)

    out = F.conv2d(x.reshape(1, batch * in_channels, height, width),
                   weight.reshape(batch * out_channels, in_channels, kernel_size, kernel_size),
                   padding=kernel_size // 2, groups=batch)
    return out.view(batch, out_channels, height, width)


class MappingNetwork(nn.Module):
    """Maps z to w: pixel norm followed by fully connected layers with scaled leaky ReLU."""

    def __init__(self, style_dim=STYLE_DIM, num_layers=8):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(style_dim, style_dim) for _ in range(num_layers))
        for layer in self.layers:
            nn.init.normal_(layer.weight, std=1 / math.sqrt(style_dim))
            nn.init.zeros_(layer.bias)

    def forward(self, z):
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2) * math.sqrt(2)
        return x


class ModulatedLayer(nn.Module):
    """One row of the layer table: modulated conv (or ToRGB), optional noise, bias, activation."""

    def __init__(self, spec, style_dim=STYLE_DIM, use_noise=False, noise_strength=0.1):
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.randn(spec.kernel_shape))
        self.scale = 1 / math.sqrt(spec.in_channels * spec.kernel_size ** 2)

        self.modulation = nn.Linear(style_dim, spec.in_channels)
        nn.init.normal_(self.modulation.weight, std=1 / math.sqrt(style_dim))
        nn.init.ones_(self.modulation.bias)

        self.bias = nn.Parameter(torch.zeros(spec.out_channels))

        if use_noise and spec.kind is LayerKind.CONV:
            self.register_buffer('noise', torch.randn(1, 1, spec.resolution, spec.resolution))
            self.noise_strength = nn.Parameter(torch.full((), float(noise_strength)))
        else:
            self.register_buffer('noise', None)
            self.register_parameter('noise_strength', None)

    def forward(self, x, style, kernel):
        if self.spec.upsample:
            x = F.interpolate(x, scale_factor=2, mode='bilinear', align_corners=False)
        out = modulated_conv2d(x, self.modulation(style), kernel * self.scale,
                               demodulate=self.spec.kind is LayerKind.CONV)
        if self.noise is not None:
            out = out + self.noise_strength * self.noise
        out = out + self.bias.view(1, -1, 1, 1)
        if self.spec.kind is LayerKind.CONV:
            out = F.leaky_relu(out, 0.2) * math.sqrt(2)
        return out


class Generator(nn.Module):
    """
    StyleGAN2-style generator built from a :class:`GeneratorArch`.

    Parameters are initialized from ``seed`` independently of the global RNG, so two generators
    built with the same arguments are identical. The generator is frozen during reenactment
    training; only the kernels handed to :meth:`forward` change per pair.
    """

    def __init__(self, arch, style_dim=STYLE_DIM, mapping_layers=8, use_noise=False,
                 noise_strength=0.1, seed=0):
        super().__init__()
        self.arch = arch
        self.style_dim = style_dim
        with seeded(seed):
            self.mapping = MappingNetwork(style_dim, mapping_layers)
            self.constant = nn.Parameter(torch.randn(1, arch.layers[0].in_channels,
                                                     arch.base_resolution, arch.base_resolution))
            self.layers = nn.ModuleList(ModulatedLayer(spec, style_dim, use_noise, noise_strength)
                                        for spec in arch.layers)

    def base_weights(self):
        """The stored kernel of every layer, keyed by layer index."""
        return {layer.spec.index: layer.weight for layer in self.layers}

    @torch.no_grad()
    def mean_latent(self, num_samples=512, seed=0):
        """Average w of ``num_samples`` fixed-seed z draws through the mapping network."""
        device = self.constant.device
        rng = torch.Generator().manual_seed(seed)
        z = torch.randn(num_samples, self.style_dim, generator=rng).to(device=device, dtype=self.constant.dtype)
        return self.mapping(z).mean(dim=0)

    def sample_latent(self, z):
        """Broadcasts mapped z vectors over all style rows (a W code expressed in W+)."""
        w = self.mapping(z)
        return LatentCode(w.unsqueeze(1).expand(-1, self.arch.num_styles, -1))

    def _check_weights(self, weights):
        if set(weights) != {spec.index for spec in self.arch.layers}:
            raise ConformanceError('Kernel set does not cover exactly the layers of the generator')
        for spec in self.arch.layers:
            kernel = weights[spec.index]
            if kernel.dim() not in (4, 5) or tuple(kernel.shape[-4:]) != spec.kernel_shape:
                raise ConformanceError(f'{spec.name}: kernel of shape {tuple(kernel.shape)}, '
                                       f'expected {spec.kernel_shape}')

    def forward(self, w, weights=None, return_activations=False):
        """
        Synthesizes images from a W+ code.

        :param w: A :class:`LatentCode` or its style tensor, single or batched.
        :param weights: Kernels keyed by layer index; the stored kernels when omitted.
        :param return_activations: Also return the output of every layer in table order.
        :return: Images in ``[-1, 1]`` of shape ``[3, R, R]`` (or ``[B, 3, R, R]`` for a batch),
            and the activation list when requested.
        :raises ConformanceError: If the code or kernels do not match the layer table.
        """
        code = w if isinstance(w, LatentCode) else LatentCode(w)
        code.validate(self.arch)
        styles = code.styles
        single = styles.dim() == 2
        if single:
            styles = styles.unsqueeze(0)

        weights = self.base_weights() if weights is None else weights
        self._check_weights(weights)

        x = self.constant.expand(styles.shape[0], -1, -1, -1)
        rgb = None
        activations = []
        for spec, layer in zip(self.arch.layers, self.layers):
            out = layer(x, styles[:, spec.style_index], weights[spec.index])
            if spec.kind is LayerKind.CONV:
                x = out
            elif rgb is None:
                rgb = out
            else:
                rgb = out + F.interpolate(rgb, scale_factor=2, mode='bilinear', align_corners=False)
            activations.append(out)

        image = torch.tanh(rgb)
        if single:
            image = image.squeeze(0)
        if return_activations:
            return image, activations
        return image


def apply_offsets(base_weights, offsets, arch=None):
    """
    Applies the offset rule ``theta_hat = theta * (1 + delta)`` to every layer that has an offset.

    Layers without an entry are returned as they are. Neither argument is modified.

    :param base_weights: Kernels keyed by layer index.
    :type base_weights: dict[int, torch.Tensor]
    :param offsets: Offsets for (a subset of) the controlled layers.
    :type offsets: WeightOffsets
    :param arch: When given, the offsets are also checked against the controlled-layer set.
    :return: A new kernel mapping.
    :rtype: dict[int, torch.Tensor]
    :raises ConformanceError: If an offset does not match its kernel.
    """
    if arch is not None:
        offsets.validate(arch)
    updated = dict(base_weights)
    for index, offset in offsets.entries.items():
        if index not in base_weights:
            raise ConformanceError(f'No base kernel for layer {index}')
        kernel = base_weights[index]
        if tuple(offset.shape[-kernel.dim():]) != tuple(kernel.shape):
            raise ConformanceError(f'Offset for layer {index} has shape {tuple(offset.shape)}, '
                                   f'kernel has {tuple(kernel.shape)}')
        updated[index] = kernel * (1 + offset)
    return updated


def synthesize(generator, weights, w, return_activations=False):
    """Runs ``generator`` on the explicit kernels ``weights``; see :meth:`Generator.forward`."""
    return generator(w, weights=weights, return_activations=return_activations)
