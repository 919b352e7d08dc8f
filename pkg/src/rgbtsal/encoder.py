"""Weight-shared dual-stream encoder.

A single backbone processes both the RGB and the thermal image, so the two
streams share every parameter and the parameter count equals one stream.
Each forward pass yields a five-level feature pyramid; level i lives at
1/2^i of the input resolution. A per-level 1x1 convolution reduces the
stage channels to a slim width for the downstream fusion and decoder.
"""

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from .exceptions import ConfigurationError, InputError

MODALITIES = ("rgb", "thermal")
NUM_LEVELS = 5


@dataclass
class BackboneConfig:
    """Static shape contract of the encoder.

    Args:
        variant: 'tiny' for plain conv blocks, 'res2net_like' for
            hierarchical-split residual blocks with the same level contract.
        stage_channels: channels produced by each of the 5 stages.
        reduced_channels: channels after each per-stage 1x1 reduction.
        input_size: square input side in pixels, must be divisible by 32.
    """

    variant: str = "tiny"
    stage_channels: tuple = (16, 32, 64, 128, 256)
    reduced_channels: tuple = (16, 16, 32, 32, 64)
    input_size: int = 64

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.reduced_channels = tuple(int(c) for c in self.reduced_channels)
        if self.variant not in ("tiny", "res2net_like"):
            raise ConfigurationError(f"unknown backbone variant: {self.variant!r}")
        if len(self.stage_channels) != NUM_LEVELS or len(self.reduced_channels) != NUM_LEVELS:
            raise ConfigurationError("stage_channels and reduced_channels need exactly 5 entries")
        if any(c < 1 for c in self.stage_channels + self.reduced_channels):
            raise ConfigurationError("channel counts must be positive")
        for i, (r, c) in enumerate(zip(self.reduced_channels, self.stage_channels)):
            if r > c:
                raise ConfigurationError(
                    f"reduced_channels[{i}]={r} exceeds stage_channels[{i}]={c}")
        if self.input_size <= 0 or self.input_size % 32 != 0:
            raise ConfigurationError(
                f"input_size must be a positive multiple of 32, got {self.input_size}")

    def level_sides(self):
        return tuple(self.input_size // 2 ** (i + 1) for i in range(NUM_LEVELS))


@dataclass
class FeaturePyramid:
    """Five feature levels for one modality, shallow to deep."""

    levels: list
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InputError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if len(self.levels) != NUM_LEVELS:
            raise InputError(f"expected {NUM_LEVELS} levels, got {len(self.levels)}")


class ConvBlock(nn.Module):
    """3x3 conv -> batch norm -> ReLU -> stride-2 max pool."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(2, stride=2)

    def forward(self, x):
        return self.pool(self.relu(self.bn(self.conv(x))))


class HierarchicalBlock(nn.Module):
    """Residual block whose 3x3 stage runs on hierarchical channel splits.

    The input is projected to scale*width channels, chunked into `scale`
    groups, and group k (k >= 2) is convolved after adding the previous
    group's output, widening the receptive field mix within one block.
    Ends with a stride-2 max pool like ConvBlock.
    """

    def __init__(self, in_channels, out_channels, scale=4):
        super().__init__()
        width = max(out_channels // scale, 4)
        self.scale = scale
        self.conv_in = nn.Conv2d(in_channels, width * scale, 1, bias=False)
        self.bn_in = nn.BatchNorm2d(width * scale)
        self.branch_convs = nn.ModuleList(
            nn.Conv2d(width, width, 3, padding=1, bias=False) for _ in range(scale - 1))
        self.branch_bns = nn.ModuleList(nn.BatchNorm2d(width) for _ in range(scale - 1))
        self.conv_out = nn.Conv2d(width * scale, out_channels, 1, bias=False)
        self.bn_out = nn.BatchNorm2d(out_channels)
        self.shortcut = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.relu = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(2, stride=2)

    def forward(self, x):
        out = self.relu(self.bn_in(self.conv_in(x)))
        splits = torch.chunk(out, self.scale, dim=1)
        ys = [splits[0]]
        prev = None
        for conv, bn, piece in zip(self.branch_convs, self.branch_bns, splits[1:]):
            z = piece if prev is None else piece + prev
            prev = self.relu(bn(conv(z)))
            ys.append(prev)
        out = self.bn_out(self.conv_out(torch.cat(ys, dim=1)))
        out = self.relu(out + self.shortcut(x))
        return self.pool(out)


class ChannelReduce(nn.Module):
    """1x1 conv -> batch norm, squeezing a stage to its reduced width.

    The norm keeps the reduced features on a stable scale for the gates
    and auxiliary heads downstream. Zero conv weights still yield exactly
    zero output: a fresh norm maps an all-zero batch to zero in train
    mode (zero batch stats) and in eval mode (zero running mean).
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return self.bn(self.conv(x))


class SharedEncoder(nn.Module):
    """Five-stage backbone plus per-stage 1x1 channel reductions.

    The same instance encodes both modalities; `encode` tags the output
    pyramid with the modality but runs identical parameters either way.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        block = ConvBlock if config.variant == "tiny" else HierarchicalBlock
        in_channels = [3] + list(config.stage_channels[:-1])
        self.stages = nn.ModuleList(
            block(cin, cout) for cin, cout in zip(in_channels, config.stage_channels))
        self.reductions = nn.ModuleList(
            ChannelReduce(c, r) for c, r in zip(config.stage_channels, config.reduced_channels))
        init_conv_weights(self)

    def forward(self, image, modality="rgb"):
        return encode(self, image, modality)


def init_conv_weights(module):
    """Kaiming fan-out init for convs, unit scale and zero bias for norms."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_encoder(config: BackboneConfig) -> SharedEncoder:
    """Build the shared encoder for a validated config."""
    return SharedEncoder(config)


def encode(encoder: SharedEncoder, image: torch.Tensor, modality="rgb") -> FeaturePyramid:
    """Run one modality through the shared backbone.

    Args:
        image: batch x 3 x input_size x input_size tensor (thermal images
            are replicated to 3 channels before this call).
        modality: 'rgb' or 'thermal', recorded on the returned pyramid.

    Returns:
        FeaturePyramid whose level i has side input_size / 2^(i+1) and
        reduced_channels[i] channels.
    """
    if modality not in MODALITIES:
        raise InputError(f"modality must be one of {MODALITIES}, got {modality!r}")
    cfg = encoder.config
    if image.dim() != 4 or image.size(1) != 3:
        raise InputError(f"expected a Bx3xHxW image tensor, got shape {tuple(image.shape)}")
    if image.size(2) != cfg.input_size or image.size(3) != cfg.input_size:
        raise InputError(
            f"expected spatial size {cfg.input_size}x{cfg.input_size}, "
            f"got {image.size(2)}x{image.size(3)}")
    levels = []
    x = image
    sides = cfg.level_sides()
    for i, (stage, reduce) in enumerate(zip(encoder.stages, encoder.reductions)):
        x = stage(x)
        feat = reduce(x)
        assert feat.shape[1] == cfg.reduced_channels[i]
        assert feat.shape[2] == sides[i] and feat.shape[3] == sides[i]
        levels.append(feat)
    return FeaturePyramid(levels=levels, modality=modality)


def save_encoder(encoder: SharedEncoder, path):
    """Write parameters plus the config so loading can validate shapes."""
    torch.save({"config": asdict(encoder.config), "state_dict": encoder.state_dict()}, path)


def load_encoder(path, expected_config: BackboneConfig = None) -> SharedEncoder:
    """Load an encoder checkpoint, refusing configs that do not match."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = BackboneConfig(**payload["config"])
    if expected_config is not None and config != expected_config:
        raise ConfigurationError(
            f"checkpoint config {config} does not match expected {expected_config}")
    encoder = SharedEncoder(config)
    encoder.load_state_dict(payload["state_dict"])
    return encoder
