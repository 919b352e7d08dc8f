"""Full saliency network: shared encoder, per-level fusion, decoder, aux heads.

Wiring is stage dependent. With no thermal input the model runs the
stage-1 path: each RGB level is self-recalibrated by its gate and only
the final map is produced. With a thermal input it runs the stage-2
path: the RGB-derived gate modulates the thermal level before the
residual RGB addition, and the auxiliary heads plus the two modality
summaries are returned for the hybrid loss. `fusion='add'` swaps the
gates for plain element-wise addition, used as an ablation baseline.
"""

from dataclasses import dataclass, asdict, field

import torch
import torch.nn as nn

from .exceptions import ConfigurationError, InputError
from .encoder import BackboneConfig, SharedEncoder, encode
from .fusion import ChannelGateFusion, squeeze, fuse_stage1, fuse_stage2
from .decoder import ProgressiveDecoder, AuxiliaryHead

FUSION_MODES = ("gated", "add")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: str = "gated"
    gate_ratio: int = 4

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.fusion not in FUSION_MODES:
            raise ConfigurationError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")


@dataclass
class ModelOutputs:
    """Logit maps and channel summaries from one forward pass.

    The thermal aux map and both summaries are None on the stage-1 path.
    """

    final: torch.Tensor
    aux_rgb: torch.Tensor = None
    aux_thermal: torch.Tensor = None
    summary_rgb: torch.Tensor = None
    summary_thermal: torch.Tensor = None


class SaliencyModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        backbone = config.backbone
        self.encoder = SharedEncoder(backbone)
        if config.fusion == "gated":
            # keyed by 1-based level so parameters serialize as hfm.<level>.fc1/fc2
            self.hfm = nn.ModuleDict({
                str(i + 1): ChannelGateFusion(c, ratio=config.gate_ratio, level_index=i + 1)
                for i, c in enumerate(backbone.reduced_channels)})
        else:
            self.hfm = None
        self.decoder = ProgressiveDecoder(backbone.reduced_channels)
        top = backbone.reduced_channels[-1]
        self.aux_rgb = AuxiliaryHead(top)
        self.aux_thermal = AuxiliaryHead(top)

    def fuse_level(self, index, rgb_level, thermal_level=None):
        """Fuse one pyramid level; index is 1-based."""
        if self.hfm is not None:
            return self.hfm[str(index)](rgb_level, thermal_level)
        if thermal_level is None:
            return rgb_level
        return rgb_level + thermal_level

    def forward(self, rgb, thermal=None) -> ModelOutputs:
        """Stage-1 wiring when thermal is None, stage-2 wiring otherwise."""
        rgb_pyr = encode(self.encoder, rgb, "rgb")
        if thermal is None:
            fused = [self.fuse_level(i + 1, level) for i, level in enumerate(rgb_pyr.levels)]
            return ModelOutputs(final=self.decoder(fused),
                                aux_rgb=self.aux_rgb(rgb_pyr.levels[-1]))
        if thermal.shape != rgb.shape:
            raise InputError(
                f"thermal shape {tuple(thermal.shape)} does not match rgb {tuple(rgb.shape)}")
        th_pyr = encode(self.encoder, thermal, "thermal")
        fused = [self.fuse_level(i + 1, r, t)
                 for i, (r, t) in enumerate(zip(rgb_pyr.levels, th_pyr.levels))]
        return ModelOutputs(
            final=self.decoder(fused),
            aux_rgb=self.aux_rgb(rgb_pyr.levels[-1]),
            aux_thermal=self.aux_thermal(th_pyr.levels[-1]),
            summary_rgb=squeeze(rgb_pyr.levels[-1]),
            summary_thermal=squeeze(th_pyr.levels[-1]),
        )


def build_model(config: ModelConfig) -> SaliencyModel:
    return SaliencyModel(config)


def save_model(model: SaliencyModel, path, extra=None):
    """Write parameters plus the ModelConfig; extra merges into the payload."""
    payload = {
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
    }
    if extra:
        overlap = set(extra) & set(payload)
        if overlap:
            raise ConfigurationError(f"extra checkpoint keys collide: {sorted(overlap)}")
        payload.update(extra)
    torch.save(payload, path)


def load_model(path, expected_config: ModelConfig = None):
    """Load a model checkpoint; returns (model, payload).

    Refuses checkpoints whose config differs from expected_config or whose
    parameter set does not cover the rebuilt model.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = ModelConfig(**payload["model_config"])
    if expected_config is not None and config != expected_config:
        raise ConfigurationError(
            f"checkpoint config {config} does not match expected {expected_config}")
    model = SaliencyModel(config)
    missing = set(model.state_dict()) - set(payload["state_dict"])
    if missing:
        raise ConfigurationError(f"checkpoint lacks parameters: {sorted(missing)}")
    model.load_state_dict(payload["state_dict"])
    return model, payload
