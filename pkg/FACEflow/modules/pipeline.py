"""
This module ties the generator, the encoders, the reenactment module and the hypernetwork into
one reenactment model.

For a (source, target) pair the source is inverted to a W+ code, its appearance features are
fused with the target's pose features, and the hypernetwork turns the fused map into offsets for
the generator kernels, which then synthesize the reenacted frame from the source's code.
"""
from dataclasses import dataclass

import torch
from torch import nn

from FACEflow.modules.encoders import check_image
from FACEflow.modules.errors import ConformanceError
from FACEflow.modules.generator import WeightOffsets, apply_offsets, synthesize


@dataclass
class ReenactmentOutput:
    images: torch.Tensor
    offsets: WeightOffsets
    latent: object
    fused: object


class Reenactor(nn.Module):
    """
    The reenactment model. Only the fusion module and the hypernetwork are trainable; the
    generator and the encoders are frozen when the model is built and stay in eval mode.
    """

    def __init__(self, generator, encoders, fusion, hypernet):
        super().__init__()
        if hypernet.arch != generator.arch:
            raise ConformanceError('Hypernetwork and generator were built for different layer tables')
        self.generator = generator
        self.encoders = encoders
        self.fusion = fusion
        self.hypernet = hypernet
        for module in (self.generator, self.encoders):
            module.requires_grad_(False)
            module.eval()

    def train(self, mode=True):
        super().train(mode)
        self.generator.eval()
        self.encoders.eval()
        return self

    def trainable_parameters(self):
        return list(self.fusion.parameters()) + list(self.hypernet.parameters())

    def frozen_modules(self):
        return {'generator': self.generator, 'encoders': self.encoders}

    def _pair(self, source, target):
        resolution = self.generator.arch.output_resolution
        source, target = check_image(source, resolution), check_image(target, resolution)
        if source.shape[0] == 1 and target.shape[0] > 1:
            source = source.expand(target.shape[0], -1, -1, -1)
        if source.shape[0] != target.shape[0]:
            raise ConformanceError(f'{source.shape[0]} source frames for {target.shape[0]} target frames')
        return source, target

    def forward(self, source, target):
        """
        Reenacts ``source`` with the pose of ``target``.

        A single source frame is reused for every target frame (one-shot setting).

        :param source: ``[3, R, R]`` or ``[B, 3, R, R]``.
        :param target: ``[3, R, R]`` or ``[B, 3, R, R]``.
        :return: Batched images plus the intermediate offsets, latent code and fused map.
        :rtype: ReenactmentOutput
        """
        source, target = self._pair(source, target)
        latent = self.encoders.invert(source)
        fused = self.fusion(self.encoders.encode_appearance(source), self.encoders.encode_pose(target))
        offsets = self.hypernet(fused)
        weights = apply_offsets(self.generator.base_weights(), offsets, self.generator.arch)
        images = synthesize(self.generator, weights, latent)
        return ReenactmentOutput(images, offsets, latent, fused)

    def reenact(self, source, target):
        return self(source, target).images

    def reconstruct(self, source):
        """Plain inversion: the source's W+ code through the unmodified generator."""
        source = check_image(source, self.generator.arch.output_resolution)
        return synthesize(self.generator, self.generator.base_weights(), self.encoders.invert(source))
