"""Channel-gated fusion of RGB and thermal feature levels.

The gate is always computed from the RGB features: a spatial global
average pool squeezes each level into a channel descriptor, a two-layer
bottleneck maps it through ReLU then sigmoid to per-channel weights in
(0,1). Stage 1 uses the weights to recalibrate the RGB features
themselves (w*R + R); stage 2 uses the same weights to modulate the
thermal features before the residual RGB addition (w*T + R). Because
the two wirings coincide when T == R, stage-1 gate parameters transfer
to stage 2 unchanged.
"""

import torch
import torch.nn as nn

from .exceptions import ConfigurationError, InputError


def squeeze(features: torch.Tensor) -> torch.Tensor:
    """Spatial global average pool: B x C x H x W -> B x C descriptor."""
    if features.dim() != 4:
        raise InputError(f"expected a BxCxHxW tensor, got shape {tuple(features.shape)}")
    if features.size(2) < 1 or features.size(3) < 1:
        raise InputError("cannot squeeze features with an empty spatial dimension")
    return features.mean(dim=(2, 3))


def fuse_stage1(rgb: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Recalibrate RGB features: out = weights*rgb + rgb, channel broadcast."""
    _check_fusable(rgb, weights)
    return weights[:, :, None, None] * rgb + rgb


def fuse_stage2(rgb: torch.Tensor, thermal: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Modulate thermal features with the RGB-derived gate: out = weights*thermal + rgb."""
    if thermal.shape != rgb.shape:
        raise InputError(
            f"thermal shape {tuple(thermal.shape)} does not match rgb {tuple(rgb.shape)}")
    _check_fusable(rgb, weights)
    return weights[:, :, None, None] * thermal + rgb


def _check_fusable(rgb, weights):
    if rgb.dim() != 4:
        raise InputError(f"expected BxCxHxW features, got shape {tuple(rgb.shape)}")
    if weights.dim() != 2 or weights.shape[0] != rgb.shape[0] or weights.shape[1] != rgb.shape[1]:
        raise InputError(
            f"gate weights {tuple(weights.shape)} do not broadcast over {tuple(rgb.shape)}")


class ChannelGateFusion(nn.Module):
    """One fusion gate for one pyramid level.

    Args:
        channels: channel count C of the level this gate serves.
        ratio: bottleneck reduction, hidden width = C // ratio (>= 1).
        level_index: 1-based pyramid level, kept for bookkeeping.
    """

    def __init__(self, channels, ratio=4, level_index=1):
        super().__init__()
        if ratio < 1:
            raise ConfigurationError(f"ratio must be >= 1, got {ratio}")
        hidden = channels // ratio
        if hidden < 1:
            raise ConfigurationError(
                f"channels={channels} with ratio={ratio} leaves no bottleneck units")
        self.channels = channels
        self.ratio = ratio
        self.level_index = level_index
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, descriptor: torch.Tensor) -> torch.Tensor:
        """B x C descriptor -> per-channel weights in (0,1)."""
        if descriptor.dim() != 2 or descriptor.size(1) != self.fc1.in_features:
            raise ConfigurationError(
                f"descriptor shape {tuple(descriptor.shape)} does not match "
                f"gate input width {self.fc1.in_features}")
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(descriptor))))

    def forward(self, rgb, thermal=None):
        """Stage-1 wiring when thermal is None, stage-2 wiring otherwise."""
        weights = self.gate(squeeze(rgb))
        if thermal is None:
            return fuse_stage1(rgb, weights)
        return fuse_stage2(rgb, thermal, weights)
