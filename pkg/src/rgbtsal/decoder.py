"""Top-down progressive decoder and the auxiliary single-conv heads.

The decoder starts from the deepest fused level and repeatedly upsamples
x2, concatenates the next shallower level, and applies a 3x3 conv block,
so every pyramid level is consumed exactly once. A final 1x1 conv and one
more x2 upsample produce single-channel logits at the network input size.

The two auxiliary heads are each one 1x1 convolution over the deepest
(level-5) features of one modality; their logits stay at level-5
resolution and are bilinearly upsampled to the ground-truth size only
when a loss is computed.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import InputError
from .encoder import NUM_LEVELS, init_conv_weights


def upsample_to(logits: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of a BxCxHxW map to a (height, width) target."""
    if logits.shape[-2:] == tuple(size):
        return logits
    return F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)


class DecoderBlock(nn.Module):
    """Upsample x2, concat the skip level, 3x3 conv + BN + ReLU."""

    def __init__(self, in_channels, skip_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels + skip_channels, out_channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = torch.cat([x, skip], dim=1)
        return self.relu(self.bn(self.conv(x)))


class ProgressiveDecoder(nn.Module):
    """Aggregate the five fused levels deep-to-shallow into logit maps."""

    def __init__(self, reduced_channels):
        super().__init__()
        if len(reduced_channels) != NUM_LEVELS:
            raise InputError(f"expected {NUM_LEVELS} channel widths, got {len(reduced_channels)}")
        self.reduced_channels = tuple(reduced_channels)
        blocks = []
        running = reduced_channels[-1]
        for skip in reversed(reduced_channels[:-1]):
            blocks.append(DecoderBlock(running, skip, skip))
            running = skip
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(running, 1, 1)
        init_conv_weights(self)

    def forward(self, fused_levels):
        """Fused levels (shallow to deep) -> B x 1 x S x S logits."""
        if len(fused_levels) != NUM_LEVELS:
            raise InputError(f"expected {NUM_LEVELS} fused levels, got {len(fused_levels)}")
        for i, level in enumerate(fused_levels):
            if level.dim() != 4 or level.size(1) != self.reduced_channels[i]:
                raise InputError(
                    f"level {i + 1} has shape {tuple(level.shape)}, "
                    f"expected {self.reduced_channels[i]} channels")
            if i > 0 and 2 * level.size(2) != fused_levels[i - 1].size(2):
                raise InputError("fused levels do not follow the halving shape contract")
        x = fused_levels[-1]
        for block, skip in zip(self.blocks, reversed(fused_levels[:-1])):
            x = block(x, skip)
        x = self.head(x)  # B x 1 x S/2 x S/2
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class AuxiliaryHead(nn.Module):
    """Single 1x1 conv decoding level-5 features to coarse logits."""

    def __init__(self, in_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, 1)

    def forward(self, top_level):
        if top_level.dim() != 4 or top_level.size(1) != self.conv.in_channels:
            raise InputError(
                f"expected Bx{self.conv.in_channels}xHxW level-5 features, "
                f"got shape {tuple(top_level.shape)}")
        return self.conv(top_level)
