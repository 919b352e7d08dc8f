"""Hybrid training objective.

Three ingredients, combined per training stage:
  - a self-supervised alignment term, 2 - 2*cos(S_r, S_t), between the
    pooled channel summaries of the two modalities' deepest features;
  - supervised soft-IoU + BCE on each auxiliary head's map;
  - supervised soft-IoU + BCE on the final fused map.
Stage 1 optimizes final_weight*sup_final + alpha*sup_rgb, covering the
terms its single-stream wiring can produce (the auxiliary term is
dropped when alpha is 0 or no auxiliary map was emitted). Stage 2
optimizes self_sup + alpha*(sup_rgb + sup_thermal) + final_weight*sup_final.
"""

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, InputError
from .decoder import upsample_to


@dataclass
class LossConfig:
    """Weights and numeric guards for the hybrid objective.

    Args:
        alpha: weight on the two auxiliary supervised terms.
        epsilon: guard added to IoU denominators and cosine norms.
        final_weight: weight on the final-map supervised term; the
            combination rule above leaves it at 1 by default.
    """

    alpha: float = 10.0
    epsilon: float = 1e-6
    final_weight: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be nonnegative, got {self.alpha}")
        if not 0.0 < self.epsilon <= 1e-4:
            raise ConfigurationError(f"epsilon must lie in (0, 1e-4], got {self.epsilon}")


@dataclass
class LossReport:
    """Detached per-term values for one optimization step."""

    self_sup: float
    sup_rgb: float
    sup_thermal: float
    sup_final: float
    total: float

    CSV_FIELDS = ("self_sup", "sup_rgb", "sup_thermal", "sup_final", "total")

    def as_row(self):
        return [getattr(self, name) for name in self.CSV_FIELDS]


def modality_summary(level5: torch.Tensor) -> torch.Tensor:
    """Per-channel spatial mean of the deepest features: B x C x H x W -> B x C."""
    if level5.dim() != 4:
        raise InputError(f"expected a BxCxHxW tensor, got shape {tuple(level5.shape)}")
    return level5.mean(dim=(2, 3))


def self_supervised_loss(s_rgb, s_thermal, epsilon=1e-6):
    """Cosine alignment distance between modality summaries, in [0, 4].

    Returns 0 when the summaries point the same way, 2 when orthogonal,
    4 when antipodal; batch rows are averaged. A zero-norm summary has no
    direction, so its cosine is taken as 0 (loss 2) with a warning.
    """
    if s_rgb.dim() == 1:
        s_rgb = s_rgb[None, :]
    if s_thermal.dim() == 1:
        s_thermal = s_thermal[None, :]
    if s_rgb.shape != s_thermal.shape:
        raise InputError(
            f"summary shapes differ: {tuple(s_rgb.shape)} vs {tuple(s_thermal.shape)}")
    dot = (s_rgb * s_thermal).sum(dim=1)
    norm_r = s_rgb.norm(dim=1)
    norm_t = s_thermal.norm(dim=1)
    degenerate = (norm_r == 0) | (norm_t == 0)
    if bool(degenerate.any()):
        warnings.warn("zero-norm modality summary, alignment loss defaults to 2", stacklevel=2)
    cos = dot / (norm_r * norm_t).clamp_min(epsilon)
    cos = torch.where(degenerate, torch.zeros_like(cos), cos)
    cos = cos.clamp(-1.0, 1.0)
    return (2.0 - 2.0 * cos).mean()


def iou_bce_loss(pred_logits, gt, epsilon=1e-6):
    """Mean BCE plus soft-IoU loss of sigmoid(pred_logits) against gt.

    The IoU term is 1 - (sum(p*g)+eps) / (sum(p+g-p*g)+eps), summed per
    image and averaged over the batch; gt must hold values in [0, 1].
    """
    if pred_logits.shape != gt.shape:
        raise InputError(
            f"prediction shape {tuple(pred_logits.shape)} does not match "
            f"ground truth {tuple(gt.shape)}")
    if bool((gt < 0).any()) or bool((gt > 1).any()):
        raise InputError("ground truth values must lie in [0, 1]")
    bce = F.binary_cross_entropy_with_logits(pred_logits, gt)
    p = torch.sigmoid(pred_logits)
    flat_p = p.flatten(start_dim=1)
    flat_g = gt.flatten(start_dim=1)
    inter = (flat_p * flat_g).sum(dim=1)
    union = (flat_p + flat_g - flat_p * flat_g).sum(dim=1)
    iou = 1.0 - (inter + epsilon) / (union + epsilon)
    return bce + iou.mean()


def supervised_loss(d_rgb, d_thermal, gt, epsilon=1e-6):
    """Sum of the two auxiliary iou_bce terms (order symmetric)."""
    return iou_bce_loss(d_rgb, gt, epsilon) + iou_bce_loss(d_thermal, gt, epsilon)


def total_loss(outputs, gt, config: LossConfig, stage: int):
    """Combine the per-term losses for one stage.

    Args:
        outputs: ModelOutputs from the matching forward wiring.
        gt: B x 1 x H x W mask with values in [0, 1].
        stage: 1 trains the final map plus, when available, the weighted
            RGB auxiliary map; 2 adds the alignment and both auxiliary terms.

    Returns:
        (total, report): the differentiable scalar and a detached LossReport.
    """
    if stage not in (1, 2):
        raise ConfigurationError(f"stage must be 1 or 2, got {stage}")
    final = upsample_to(outputs.final, gt.shape[-2:])
    sup_final = iou_bce_loss(final, gt, config.epsilon)
    if stage == 1:
        total = config.final_weight * sup_final
        sup_rgb = 0.0
        if config.alpha > 0 and outputs.aux_rgb is not None:
            aux = iou_bce_loss(upsample_to(outputs.aux_rgb, gt.shape[-2:]), gt, config.epsilon)
            total = total + config.alpha * aux
            sup_rgb = aux.item()
        report = LossReport(0.0, sup_rgb, 0.0, sup_final.item(), total.item())
        return total, report
    needed = (outputs.aux_rgb, outputs.aux_thermal, outputs.summary_rgb, outputs.summary_thermal)
    if any(part is None for part in needed):
        raise ConfigurationError("stage 2 requires thermal-branch outputs; "
                                 "run the forward pass with a thermal image")
    self_sup = self_supervised_loss(outputs.summary_rgb, outputs.summary_thermal, config.epsilon)
    sup_rgb = iou_bce_loss(upsample_to(outputs.aux_rgb, gt.shape[-2:]), gt, config.epsilon)
    sup_thermal = iou_bce_loss(upsample_to(outputs.aux_thermal, gt.shape[-2:]), gt, config.epsilon)
    total = self_sup + config.alpha * (sup_rgb + sup_thermal) + config.final_weight * sup_final
    report = LossReport(self_sup.item(), sup_rgb.item(), sup_thermal.item(),
                        sup_final.item(), total.item())
    return total, report
