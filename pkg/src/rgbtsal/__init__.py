"""RGB-thermal salient object detection at desk scale.

Provides a weight-shared dual-stream encoder with channel-gated fusion,
a hybrid training objective with a self-supervised alignment term,
sequential and joint training schedules, a synthetic RGB-T data
generator, and the standard saliency evaluation metrics.
"""

__version__ = "0.1.0"

from .encoder import BackboneConfig, SharedEncoder, build_encoder, encode
from .fusion import ChannelGateFusion, squeeze, fuse_stage1, fuse_stage2
from .model import ModelConfig, SaliencyModel, save_model, load_model
from .losses import LossConfig, LossReport, total_loss
from .trainer import TrainConfig, run_training
from .data import SynthConfig, ImagePair, generate_synthetic, load_vt_dataset, misalign_thermal
from .metrics import MetricReport, evaluate_dataset

__all__ = [
    "BackboneConfig", "SharedEncoder", "build_encoder", "encode",
    "ChannelGateFusion", "squeeze", "fuse_stage1", "fuse_stage2",
    "ModelConfig", "SaliencyModel", "save_model", "load_model",
    "LossConfig", "LossReport", "total_loss",
    "TrainConfig", "run_training",
    "SynthConfig", "ImagePair", "generate_synthetic", "load_vt_dataset", "misalign_thermal",
    "MetricReport", "evaluate_dataset",
]
