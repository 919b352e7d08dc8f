"""Training orchestration.

Four strategies share one SGD loop:
  - full_sequential: stage 1 trains every parameter on RGB only (the
    gates run in their self-recalibration wiring, so they receive
    gradients) against the final map plus the weighted RGB auxiliary
    map, then stage 2 trains everything on RGB-T with the full hybrid
    loss from the stage-1 checkpoint.
  - partial_sequential: same schedule, but stage 1 updates only the
    RGB path (encoder, decoder, RGB auxiliary head); the fusion gates
    and the thermal auxiliary head keep their initialization.
  - joint: single phase in stage-2 wiring from scratch for
    epochs_per_stage, so it sees the same RGB-T optimization budget as
    stage 2 of the sequential schedules; sequential adds its RGB
    pretraining on top rather than trading RGB-T steps for it.
  - rgb_only: single phase in stage-1 wiring for epochs_per_stage, an
    RGB baseline for ablations.

hybrid_loss=False strips every term except the final map's: alpha is
forced to 0 and the stage-1 combination rule is used in both wirings,
which is the plain fused baseline for ablations.

Both sequential stages use identical hyperparameters, enforced by a
config hash stored in the stage-1 checkpoint. The optimizer is plain
SGD: velocity = momentum*velocity + grad + weight_decay*param, then
param -= lr*velocity, with a per-phase polynomial learning-rate decay
lr * (1 - step/total_steps)^lr_power.
"""

import csv
import hashlib
import math
from dataclasses import dataclass, fields, asdict
from pathlib import Path

import torch

from .exceptions import ConfigurationError, DataError, UsageError
from .encoder import BackboneConfig
from .model import ModelConfig, SaliencyModel, save_model
from .losses import LossConfig, total_loss
from .data import load_vt_dataset, to_tensors

STRATEGIES = ("joint", "partial_sequential", "full_sequential", "rgb_only")
FUSIONS = ("gated", "add")
LOG_COLUMNS = ("step", "stage", "self_sup", "sup_rgb", "sup_thermal", "sup_final", "total")
# fields that may differ between runs that still count as "same hyperparameters"
HASH_EXCLUDED_FIELDS = ("seed", "strategy")


@dataclass
class TrainConfig:
    batch_size: int = 10
    image_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0005
    learning_rate: float = 0.02
    lr_power: float = 0.9
    epochs_per_stage: int = 20
    seed: int = 0
    alpha: float = 10.0
    final_weight: float = 1.0
    epsilon: float = 1e-6
    strategy: str = "full_sequential"
    backbone: str = "tiny"
    stage_channels: str = ""    # comma-separated override, empty = variant default
    reduced_channels: str = ""
    gate_ratio: int = 4
    fusion: str = "gated"
    hybrid_loss: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs_per_stage < 0:
            raise ConfigurationError(f"epochs_per_stage must be >= 0, got {self.epochs_per_stage}")
        for name in ("momentum", "weight_decay", "learning_rate", "lr_power", "alpha",
                     "final_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")


def _parse_channels(text):
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"bad channel list {text!r}: {exc}") from exc


def _parse_value(field_type, key, raw):
    raw = raw.strip()
    try:
        if field_type is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return field_type(raw)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {exc}") from exc


def config_from_mapping(mapping) -> TrainConfig:
    """Build a TrainConfig from string key/value pairs.

    Unknown keys raise UsageError naming the key; unparseable or invalid
    values raise ConfigurationError.
    """
    by_name = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    for key, raw in mapping.items():
        if key not in by_name:
            raise UsageError(f"unknown config key: {key}")
        kwargs[key] = _parse_value(by_name[key].type, key, raw) if isinstance(raw, str) else raw
    return TrainConfig(**kwargs)


def parse_config_file(path):
    """Read key=value lines ('#' comments and blanks allowed) into a dict."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def config_hash(config: TrainConfig) -> str:
    """Digest of every hyperparameter that must match across stages."""
    parts = [f"{f.name}={getattr(config, f.name)!r}" for f in fields(TrainConfig)
             if f.name not in HASH_EXCLUDED_FIELDS]
    return hashlib.sha256(";".join(parts).encode()).hexdigest()


def model_config(config: TrainConfig) -> ModelConfig:
    kwargs = {"variant": config.backbone, "input_size": config.image_size}
    if config.stage_channels:
        kwargs["stage_channels"] = _parse_channels(config.stage_channels)
    if config.reduced_channels:
        kwargs["reduced_channels"] = _parse_channels(config.reduced_channels)
    return ModelConfig(backbone=BackboneConfig(**kwargs), fusion=config.fusion,
                       gate_ratio=config.gate_ratio)


def loss_config(config: TrainConfig) -> LossConfig:
    # hybrid_loss off keeps only the final-map term: alpha 0 drops the
    # auxiliary terms in both stages and stage selection drops the rest.
    alpha = config.alpha if config.hybrid_loss else 0.0
    return LossConfig(alpha=alpha, epsilon=config.epsilon,
                      final_weight=config.final_weight)


class LossLogger:
    """Append-only CSV of per-step loss terms with stable formatting."""

    def __init__(self, path):
        self.path = Path(path)
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(LOG_COLUMNS)

    def log(self, step, stage_label, report):
        row = [str(step), stage_label] + [f"{v:.17g}" for v in report.as_row()]
        self._writer.writerow(row)

    def close(self):
        self._file.close()


def read_loss_log(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def _phase_seed(seed, label, epoch):
    digest = hashlib.sha256(f"{seed}:{label}:{epoch}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2 ** 63)


def _stage1_parameters(model, strategy):
    if strategy == "partial_sequential":
        modules = [model.encoder, model.decoder, model.aux_rgb]
        return [p for m in modules for p in m.parameters()]
    return list(model.parameters())


def _train_phase(model, tensors, config, stage, label, parameters, epochs, logger, start_step=0):
    """One optimization phase; returns the step counter after the phase.

    The polynomial decay restarts each phase, so stage 2 anneals over its
    own budget exactly like a from-scratch phase does; start_step only
    offsets the logged step numbers.
    """
    rgb_all, th_all, gt_all = tensors
    n = rgb_all.size(0)
    if n == 0:
        raise DataError("empty dataset")
    if config.batch_size > n:
        raise DataError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    model.train()
    optimizer = torch.optim.SGD(parameters, lr=config.learning_rate,
                                momentum=config.momentum, weight_decay=config.weight_decay)
    losses = loss_config(config)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = epochs * steps_per_epoch
    loss_stage = 1 if (stage == 1 or not config.hybrid_loss) else 2
    step = start_step
    local = 0
    for epoch in range(epochs):
        generator = torch.Generator().manual_seed(_phase_seed(config.seed, label, epoch))
        order = torch.randperm(n, generator=generator)
        for chunk in order.split(config.batch_size):
            lr = config.learning_rate * (1.0 - local / total_steps) ** config.lr_power
            for group in optimizer.param_groups:
                group["lr"] = lr
            rgb = rgb_all[chunk]
            gt = gt_all[chunk]
            outputs = model(rgb) if stage == 1 else model(rgb, th_all[chunk])
            loss, report = total_loss(outputs, gt, losses, loss_stage)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            local += 1
            if logger is not None:
                logger.log(step, label, report)
    return step


def _checkpoint_extra(config, label, step):
    return {
        "stage": label,
        "config_hash": config_hash(config),
        "train_config": asdict(config),
        "rng_state": torch.get_rng_state(),
        "steps": step,
    }


def train_stage1(model, tensors, config, out_dir, logger=None, start_step=0):
    """RGB-only phase of a sequential run; writes <out_dir>/stage1.ckpt."""
    if config.strategy not in ("partial_sequential", "full_sequential"):
        raise ConfigurationError(
            f"stage 1 requires a sequential strategy, got {config.strategy!r}")
    parameters = _stage1_parameters(model, config.strategy)
    step = _train_phase(model, tensors, config, stage=1, label="stage1",
                        parameters=parameters, epochs=config.epochs_per_stage,
                        logger=logger, start_step=start_step)
    path = Path(out_dir) / "stage1.ckpt"
    extra = _checkpoint_extra(config, "stage1", step)
    save_model(model, path, extra)
    return {"path": path, "steps": step, **extra}


def train_stage2(model, checkpoint, tensors, config, out_dir, logger=None):
    """RGB-T phase from a stage-1 checkpoint; writes <out_dir>/stage2.ckpt.

    Refuses checkpoints trained under different hyperparameters (the two
    stages must match) and checkpoints missing model parameters.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = torch.load(checkpoint, map_location="cpu", weights_only=True)
    if checkpoint.get("config_hash") != config_hash(config):
        raise ConfigurationError(
            "stage-1 checkpoint was trained with different hyperparameters; "
            "both stages must use identical settings")
    if "state_dict" in checkpoint:
        missing = set(model.state_dict()) - set(checkpoint["state_dict"])
        if missing:
            raise ConfigurationError(f"checkpoint lacks parameters: {sorted(missing)}")
        model.load_state_dict(checkpoint["state_dict"])
        torch.set_rng_state(checkpoint["rng_state"])
    start = checkpoint.get("steps", 0)
    step = _train_phase(model, tensors, config, stage=2, label="stage2",
                        parameters=list(model.parameters()),
                        epochs=config.epochs_per_stage, logger=logger, start_step=start)
    path = Path(out_dir) / "stage2.ckpt"
    extra = _checkpoint_extra(config, "stage2", step)
    save_model(model, path, extra)
    return {"path": path, "steps": step, **extra}


def train_joint(model, tensors, config, out_dir, logger=None):
    """Single-phase RGB-T training from scratch; writes <out_dir>/joint.ckpt."""
    step = _train_phase(model, tensors, config, stage=2, label="joint",
                        parameters=list(model.parameters()),
                        epochs=config.epochs_per_stage, logger=logger)
    path = Path(out_dir) / "joint.ckpt"
    extra = _checkpoint_extra(config, "joint", step)
    save_model(model, path, extra)
    return {"path": path, "steps": step, **extra}


def train_rgb_only(model, tensors, config, out_dir, logger=None):
    """Single-phase RGB-only baseline; writes <out_dir>/rgb_only.ckpt."""
    step = _train_phase(model, tensors, config, stage=1, label="rgb_only",
                        parameters=list(model.parameters()),
                        epochs=config.epochs_per_stage, logger=logger)
    path = Path(out_dir) / "rgb_only.ckpt"
    extra = _checkpoint_extra(config, "rgb_only", step)
    save_model(model, path, extra)
    return {"path": path, "steps": step, **extra}


def run_training(config: TrainConfig, data, out_dir):
    """Train per config.strategy; returns checkpoint paths and the loss log.

    `data` is a dataset root (loaded at config.image_size) or a prepared
    list of ImagePairs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    if isinstance(data, (str, Path)):
        pairs = load_vt_dataset(data, size=config.image_size)
    else:
        pairs = data
    if not pairs:
        raise DataError("empty dataset")
    tensors = to_tensors(pairs)
    model = SaliencyModel(model_config(config))
    logger = LossLogger(out / "loss_log.csv")
    try:
        if config.strategy == "joint":
            results = [train_joint(model, tensors, config, out, logger)]
        elif config.strategy == "rgb_only":
            results = [train_rgb_only(model, tensors, config, out, logger)]
        else:
            first = train_stage1(model, tensors, config, out, logger)
            second = train_stage2(model, first, tensors, config, out, logger)
            results = [first, second]
    finally:
        logger.close()
    return {
        "checkpoints": [str(r["path"]) for r in results],
        "loss_log": str(out / "loss_log.csv"),
        "steps": results[-1]["steps"],
    }
