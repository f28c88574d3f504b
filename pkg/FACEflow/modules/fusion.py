"""
This module contains the reenactment module that blends appearance and pose features.

The pose features are projected to the appearance channel count by a bias-free 1x1 convolution.
Each branch then gets its own scale and shift maps from 1x1 convolutions, and the fused map is

    f_r = gamma_app * f_app + beta_app + gamma_p * f_p' + beta_p

With ``cross_conditioning`` the pose branch's scale and shift are computed from the appearance
features and the other way round.

Functions:
    project_pose: projects a pose feature map to 512 channels.
    fuse: computes the fused feature map.
"""
import torch
from torch import nn

from FACEflow.modules.encoders import FEATURE_CHANNELS, FeatureKind, FeatureMap
from FACEflow.modules.errors import ConformanceError


def _modulation_conv(channels):
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.bias)
    return conv


class ReenactmentModule(nn.Module):
    """
    Trainable fusion parameters: the pose projection and the four modulation convolutions.

    Scale convolutions are read with a +1 offset, so with zero biases the module starts close to
    plain addition of the two branches.
    """

    def __init__(self, cross_conditioning=False):
        super().__init__()
        channels = FEATURE_CHANNELS[FeatureKind.FUSED]
        self.cross_conditioning = cross_conditioning
        self.pose_projection = nn.Conv2d(FEATURE_CHANNELS[FeatureKind.POSE], channels, 1, bias=False)
        self.gamma_app = _modulation_conv(channels)
        self.beta_app = _modulation_conv(channels)
        self.gamma_p = _modulation_conv(channels)
        self.beta_p = _modulation_conv(channels)

    def forward(self, f_app, f_p):
        return fuse(f_app, f_p, self)


def _batched(feature_map, kind):
    if not isinstance(feature_map, FeatureMap):
        feature_map = FeatureMap(feature_map, kind)
    if feature_map.kind is not kind:
        raise ConformanceError(f'Expected a {kind.value} feature map, got {feature_map.kind.value}')
    data = feature_map.data
    return (data.unsqueeze(0), True) if data.dim() == 3 else (data, False)


def project_pose(f_p, params):
    """
    Projects a pose feature map to the appearance channel count.

    :param f_p: Pose feature map, 2048x7x7 (optionally batched).
    :type f_p: FeatureMap
    :param params: The reenactment module holding the projection.
    :type params: ReenactmentModule
    :return: Projected features, 512x7x7 (batched like the input). Linear in ``f_p``.
    :rtype: torch.Tensor
    :raises ConformanceError: If ``f_p`` is not a pose feature map.
    """
    data, single = _batched(f_p, FeatureKind.POSE)
    projected = params.pose_projection(data)
    return projected.squeeze(0) if single else projected


def fuse(f_app, f_p, params):
    """
    Fuses appearance and pose features into the map the hypernetwork reads.

    :param f_app: Appearance feature map, 512x7x7.
    :type f_app: FeatureMap
    :param f_p: Pose feature map, 2048x7x7.
    :type f_p: FeatureMap
    :param params: Fusion parameters.
    :type params: ReenactmentModule
    :return: The fused map, 512x7x7, batched like the inputs.
    :rtype: FeatureMap
    :raises ConformanceError: On wrong shapes or mismatched batch sizes.
    """
    app, single_app = _batched(f_app, FeatureKind.APPEARANCE)
    pose, single_pose = _batched(f_p, FeatureKind.POSE)
    if single_app != single_pose or app.shape[0] != pose.shape[0]:
        raise ConformanceError(f'Appearance batch {tuple(app.shape)} does not match pose batch {tuple(pose.shape)}')

    projected = params.pose_projection(pose)
    app_source, pose_source = (projected, app) if params.cross_conditioning else (app, projected)
    fused = ((params.gamma_app(app_source) + 1) * app + params.beta_app(app_source)
             + (params.gamma_p(pose_source) + 1) * projected + params.beta_p(pose_source))
    if single_app:
        fused = fused.squeeze(0)
    return FeatureMap(fused, FeatureKind.FUSED)


def force_identity_modulation(params):
    """Sets every modulation convolution to gamma = 1, beta = 0, which turns fusion into addition."""
    with torch.no_grad():
        for conv in (params.gamma_app, params.beta_app, params.gamma_p, params.beta_p):
            conv.weight.zero_()
            conv.bias.zero_()
    return params
