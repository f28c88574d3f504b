"""
This module contains the hypernetwork that predicts weight offsets for the generator.

Every controlled convolution layer gets a reenactment block that reads the fused 512x7x7 map,
shrinks it to a 512-vector with a small conv stack (7 -> 7 -> 5 -> 3 -> 1) and maps it to a
C_out x C_in offset, which is repeated over the kernel's spatial positions.

Square layers at the generator's widest channel count use shared blocks: their last two fully
connected layers (``expand`` to C x C and a row-wise ``mix``) exist once and serve all of them.
Every other layer uses a layer-specific block with its own C_out * C_in output layer.

Functions:
    default_assignment: shared / layer-specific split for a generator arch.
    predict_offsets: offsets for a fused feature map.
    param_count, param_breakdown: analytic parameter counts.
"""
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from FACEflow.modules.encoders import FEATURE_CHANNELS, FeatureKind, FeatureMap
from FACEflow.modules.errors import ConformanceError
from FACEflow.modules.generator import LayerKind, WeightOffsets, seeded

FEATURE_DIM = FEATURE_CHANNELS[FeatureKind.FUSED]
SHARED_HIDDEN = 128
SPECIFIC_HIDDEN = 256


class BlockType(str, Enum):
    SHARED = 'Shared'
    LAYER_SPECIFIC = 'LayerSpecific'


@dataclass(frozen=True)
class BlockAssignment:
    """Block type of every controlled layer, as ``(layer_index, BlockType)`` pairs in layer order."""
    entries: tuple

    def validate(self, arch):
        for index, block_type in self.entries:
            if not 0 <= index < len(arch.layers) or arch.layers[index].kind is not LayerKind.CONV:
                raise ConformanceError(f'Block assignment references layer {index}, which is not a convolution')
            spec = arch.layers[index]
            if block_type is BlockType.SHARED and not spec.out_channels == spec.in_channels == arch.max_channels:
                raise ConformanceError(f'{spec.name} ({spec.out_channels}x{spec.in_channels}) cannot use a '
                                       f'shared block, which predicts {arch.max_channels}x{arch.max_channels} offsets')
        return self

    def indices(self, block_type=None):
        return [index for index, kind in self.entries if block_type is None or kind is block_type]

    def to_list(self):
        return [[index, kind.value] for index, kind in self.entries]

    @classmethod
    def from_list(cls, values):
        return cls(tuple((int(index), BlockType(kind)) for index, kind in values))


def default_assignment(arch):
    """Shared blocks for square convolutions at the widest channel count, layer-specific for the rest."""
    entries = []
    for spec in arch.conv_layers:
        square = spec.out_channels == spec.in_channels == arch.max_channels
        entries.append((spec.index, BlockType.SHARED if square else BlockType.LAYER_SPECIFIC))
    return BlockAssignment(tuple(entries))


def _conv_stack(channels, hidden):
    return nn.Sequential(
        nn.Conv2d(channels, hidden, 3, padding=1), nn.LeakyReLU(0.01),
        nn.Conv2d(hidden, hidden, 3), nn.LeakyReLU(0.01),
        nn.Conv2d(hidden, hidden, 3), nn.LeakyReLU(0.01),
        nn.Conv2d(hidden, channels, 3), nn.LeakyReLU(0.01),
        nn.Flatten())


def _repeat_spatially(offset, kernel_size):
    return offset[..., None, None].repeat(1, 1, 1, kernel_size, kernel_size)


class SharedHeads(nn.Module):
    """The two fully connected layers shared by all shared blocks; ``mix`` starts at zero."""

    def __init__(self, channels, feature_dim=FEATURE_DIM):
        super().__init__()
        self.channels = channels
        self.expand = nn.Linear(feature_dim, channels * channels)
        self.mix = nn.Linear(channels, channels)
        nn.init.zeros_(self.mix.weight)
        nn.init.zeros_(self.mix.bias)

    def forward(self, code):
        rows = self.expand(code).view(-1, self.channels, self.channels)
        return self.mix(nn.functional.leaky_relu(rows, 0.01))


class SharedBlock(nn.Module):
    """
    Reenactment block of a shared-type layer.

    Its convolutions and fully connected layer reduce the fused map to a code; the
    :class:`SharedHeads` passed to :meth:`forward` turn that code into the offset, so every shared
    block of a sharing network reads and trains the same heads.
    """

    def __init__(self, spec, hidden=SHARED_HIDDEN, feature_dim=FEATURE_DIM):
        super().__init__()
        self.spec = spec
        self.features = _conv_stack(feature_dim, hidden)
        self.fc = nn.Linear(feature_dim, feature_dim)

    def forward(self, fused, heads):
        code = nn.functional.leaky_relu(self.fc(self.features(fused)), 0.01)
        return _repeat_spatially(heads(code), self.spec.kernel_size)


class LayerSpecificBlock(nn.Module):
    """Reenactment block with its own output head, sized to its layer; the head starts at zero."""

    def __init__(self, spec, hidden=SPECIFIC_HIDDEN, feature_dim=FEATURE_DIM):
        super().__init__()
        self.spec = spec
        self.features = _conv_stack(feature_dim, hidden)
        self.head = nn.Linear(feature_dim, spec.out_channels * spec.in_channels)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, fused):
        offset = self.head(self.features(fused)).view(-1, self.spec.out_channels, self.spec.in_channels)
        return _repeat_spatially(offset, self.spec.kernel_size)


class Hypernetwork(nn.Module):
    """
    Reenactment blocks for every assigned layer of ``arch``.

    With ``sharing`` off each shared-type block gets its own copy of the heads, which is the
    configuration the parameter saving of sharing is measured against.
    """

    def __init__(self, arch, assignment=None, sharing=True, shared_hidden=SHARED_HIDDEN,
                 specific_hidden=SPECIFIC_HIDDEN, seed=0):
        super().__init__()
        self.arch = arch
        self.assignment = (assignment or default_assignment(arch)).validate(arch)
        self.sharing = sharing
        with seeded(seed):
            self.blocks = nn.ModuleDict()
            self.heads = nn.ModuleDict()
            for index, block_type in self.assignment.entries:
                spec = arch.layers[index]
                if block_type is BlockType.SHARED:
                    self.blocks[f'layer{index}'] = SharedBlock(spec, shared_hidden)
                    if not sharing:
                        self.heads[f'layer{index}'] = SharedHeads(arch.max_channels)
                else:
                    self.blocks[f'layer{index}'] = LayerSpecificBlock(spec, specific_hidden)
            self.shared_heads = SharedHeads(arch.max_channels) if sharing and self.assignment.indices(
                BlockType.SHARED) else None

    def heads_for(self, index):
        return self.shared_heads if self.sharing else self.heads[f'layer{index}']

    def forward(self, f_r):
        return predict_offsets(f_r, self)


def predict_offsets(f_r, params, assignment=None):
    """
    Predicts one offset per assigned layer from a fused feature map.

    :param f_r: Fused feature map, 512x7x7 or batched.
    :type f_r: FeatureMap
    :param params: The hypernetwork.
    :type params: Hypernetwork
    :param assignment: Restricts prediction to these layers; all blocks of ``params`` when omitted.
    :type assignment: BlockAssignment
    :return: Offsets keyed by layer index, each of the layer's kernel shape (batched like ``f_r``).
    :rtype: WeightOffsets
    :raises ConformanceError: If ``f_r`` is not a fused map or the assignment names a layer without
        a block of the matching type.
    """
    if not isinstance(f_r, FeatureMap):
        f_r = FeatureMap(f_r, FeatureKind.FUSED)
    if f_r.kind is not FeatureKind.FUSED:
        raise ConformanceError(f'Expected a fused feature map, got {f_r.kind.value}')
    assignment = (assignment or params.assignment).validate(params.arch)
    single = f_r.data.dim() == 3
    fused = f_r.data.unsqueeze(0) if single else f_r.data

    entries = {}
    for index, block_type in assignment.entries:
        block = params.blocks[f'layer{index}'] if f'layer{index}' in params.blocks else None
        expected = SharedBlock if block_type is BlockType.SHARED else LayerSpecificBlock
        if not isinstance(block, expected):
            raise ConformanceError(f'No {block_type.value} block for layer {index}')
        offset = block(fused, params.heads_for(index)) if block_type is BlockType.SHARED else block(fused)
        entries[index] = offset.squeeze(0) if single else offset
    return WeightOffsets(entries)


def _conv(in_channels, out_channels, kernel_size=3):
    return in_channels * out_channels * kernel_size * kernel_size + out_channels


def _linear(in_features, out_features):
    return in_features * out_features + out_features


@dataclass(frozen=True)
class ParamCount:
    """Parameter totals of a hypernetwork, split by where they live."""
    shared_blocks: int
    shared_heads: int
    specific_blocks: int

    @property
    def total(self):
        return self.shared_blocks + self.shared_heads + self.specific_blocks


def param_breakdown(assignment, arch, sharing=True, shared_hidden=SHARED_HIDDEN,
                    specific_hidden=SPECIFIC_HIDDEN, feature_dim=FEATURE_DIM):
    """
    Analytic parameter count of :class:`Hypernetwork`, with subtotals.

    :return: Conv stacks and per-block layers of shared blocks, the head layers (counted once when
        shared, once per block otherwise), and the layer-specific blocks.
    :rtype: ParamCount
    """
    assignment.validate(arch)

    def stack(hidden):
        return _conv(feature_dim, hidden) + 2 * _conv(hidden, hidden) + _conv(hidden, feature_dim)

    shared = assignment.indices(BlockType.SHARED)
    channels = arch.max_channels
    heads = _linear(feature_dim, channels * channels) + _linear(channels, channels)
    specific = sum(stack(specific_hidden)
                   + _linear(feature_dim, arch.layers[i].out_channels * arch.layers[i].in_channels)
                   for i in assignment.indices(BlockType.LAYER_SPECIFIC))
    return ParamCount(
        shared_blocks=len(shared) * (stack(shared_hidden) + _linear(feature_dim, feature_dim)),
        shared_heads=(heads if shared else 0) if sharing else heads * len(shared),
        specific_blocks=specific,
    )


def param_count(assignment, arch, sharing=True, **kwargs):
    """Total analytic parameter count; see :func:`param_breakdown`."""
    return param_breakdown(assignment, arch, sharing, **kwargs).total
