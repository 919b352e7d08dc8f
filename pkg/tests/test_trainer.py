import copy

import numpy as np
import pytest
import torch

from rgbtsal.data import SynthConfig, generate_synthetic, load_vt_dataset, to_tensors
from rgbtsal.exceptions import ConfigurationError, DataError, UsageError
from rgbtsal.losses import total_loss
from rgbtsal.metrics import mae
from rgbtsal.model import SaliencyModel, load_model
from rgbtsal.trainer import (TrainConfig, config_from_mapping, parse_config_file,
                             config_hash, model_config, loss_config, read_loss_log,
                             run_training, train_stage1, train_stage2,
                             LOG_COLUMNS, STRATEGIES)

SMALL = dict(image_size=32, stage_channels="4,8,8,16,16", reduced_channels="4,4,8,8,8",
             epochs_per_stage=1, batch_size=10, seed=3)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainset")
    generate_synthetic(SynthConfig(n_samples=10, size=32, seed=5), root)
    return load_vt_dataset(root)


def small_model(config):
    torch.manual_seed(config.seed)
    return SaliencyModel(model_config(config))


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.strategy == "full_sequential"
        assert cfg.learning_rate == 0.02
        assert cfg.momentum == 0.9 and cfg.weight_decay == 0.0005

    @pytest.mark.parametrize("kwargs", [
        {"batch_size": 0},
        {"epochs_per_stage": -1},
        {"learning_rate": -0.1},
        {"momentum": -0.5},
        {"strategy": "threephase"},
        {"fusion": "concat"},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)


class TestConfigParsing:
    def test_strings_are_coerced(self):
        cfg = config_from_mapping({"batch_size": "4", "learning_rate": "0.1",
                                   "hybrid_loss": "false", "strategy": "joint"})
        assert cfg.batch_size == 4
        assert cfg.learning_rate == 0.1
        assert cfg.hybrid_loss is False
        assert cfg.strategy == "joint"

    def test_unknown_key_is_usage_error(self):
        with pytest.raises(UsageError, match="learnig_rate"):
            config_from_mapping({"learnig_rate": "0.1"})

    def test_bad_value_is_config_error(self):
        with pytest.raises(ConfigurationError, match="batch_size"):
            config_from_mapping({"batch_size": "ten"})

    @pytest.mark.parametrize("raw,expected", [
        ("true", True), ("1", True), ("yes", True), ("ON", True),
        ("false", False), ("0", False), ("no", False), ("Off", False),
    ])
    def test_bool_spellings(self, raw, expected):
        assert config_from_mapping({"hybrid_loss": raw}).hybrid_loss is expected

    def test_bad_bool_is_config_error(self):
        with pytest.raises(ConfigurationError, match="hybrid_loss"):
            config_from_mapping({"hybrid_loss": "maybe"})

    def test_config_file_roundtrip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nbatch_size = 4\n\nseed=9  # trailing\n")
        mapping = parse_config_file(path)
        assert mapping == {"batch_size": "4", "seed": "9"}

    def test_config_file_malformed_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("batch_size 4\n")
        with pytest.raises(UsageError, match=":1:"):
            parse_config_file(path)

    def test_channel_override_reaches_backbone(self):
        cfg = TrainConfig(**SMALL)
        backbone = model_config(cfg).backbone
        assert backbone.stage_channels == (4, 8, 8, 16, 16)
        assert backbone.reduced_channels == (4, 4, 8, 8, 8)
        assert backbone.input_size == 32

    def test_bad_channel_override(self):
        with pytest.raises(ConfigurationError, match="channel"):
            model_config(TrainConfig(stage_channels="4,x,8,8,8"))

    def test_loss_config_carries_fields(self):
        losses = loss_config(TrainConfig(alpha=5.0, epsilon=1e-7, final_weight=2.0))
        assert losses.alpha == 5.0
        assert losses.epsilon == 1e-7
        assert losses.final_weight == 2.0


class TestConfigHash:
    def test_seed_and_strategy_excluded(self):
        base = TrainConfig()
        assert config_hash(TrainConfig(seed=1)) == config_hash(base)
        assert config_hash(TrainConfig(strategy="joint")) == config_hash(base)

    def test_hyperparameters_included(self):
        base = TrainConfig()
        assert config_hash(TrainConfig(learning_rate=0.01)) != config_hash(base)
        assert config_hash(TrainConfig(alpha=5)) != config_hash(base)
        assert config_hash(TrainConfig(fusion="add")) != config_hash(base)


class TestSgdSemantics:
    def test_update_rule_matches_hand_computation(self):
        # velocity = momentum*velocity + grad + wd*param; param -= lr*velocity
        param = torch.nn.Parameter(torch.tensor([2.0]))
        opt = torch.optim.SGD([param], lr=0.1, momentum=0.9, weight_decay=0.01)
        p, v = 2.0, 0.0
        for _ in range(3):
            opt.zero_grad()
            loss = (param ** 2).sum()
            loss.backward()
            opt.step()
            g = 2.0 * p + 0.01 * p
            v = 0.9 * v + g
            p = p - 0.1 * v
            assert param.item() == pytest.approx(p, rel=1e-6)

    def test_one_step_matches_manual_replication(self, dataset):
        cfg = TrainConfig(strategy="joint", **SMALL)
        tensors = to_tensors(dataset)
        model = small_model(cfg)
        twin = copy.deepcopy(model)

        out_dir = None
        from rgbtsal.trainer import _train_phase
        _train_phase(model, tensors, cfg, stage=2, label="joint",
                     parameters=list(model.parameters()), epochs=1, logger=None)

        twin.train()
        opt = torch.optim.SGD(twin.parameters(), lr=cfg.learning_rate,
                              momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        rgb, th, gt = tensors
        outputs = twin(rgb, th)
        loss, _ = total_loss(outputs, gt, loss_config(cfg), stage=2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        for a, b in zip(model.parameters(), twin.parameters()):
            assert torch.allclose(a, b, atol=1e-7)


class TestTrainingPhases:
    def test_duplicated_thermal_input_reproduces_stage1_forward(self, dataset):
        # weight sharing plus the gate identity makes the two wirings agree
        cfg = TrainConfig(**SMALL)
        model = small_model(cfg)
        model.eval()
        rgb, _, _ = to_tensors(dataset)
        with torch.no_grad():
            alone = model(rgb)
            doubled = model(rgb, rgb)
        assert torch.equal(alone.final, doubled.final)
        assert torch.equal(alone.aux_rgb, doubled.aux_rgb)
        assert torch.equal(doubled.summary_rgb, doubled.summary_thermal)

    def test_zero_learning_rate_keeps_parameters(self, dataset, tmp_path):
        cfg = TrainConfig(strategy="joint", learning_rate=0.0, **SMALL)
        run_training(cfg, dataset, tmp_path)
        model, _ = load_model(tmp_path / "joint.ckpt")
        reference = small_model(cfg)
        for (name, a), (_, b) in zip(model.named_parameters(),
                                     reference.named_parameters()):
            assert torch.equal(a, b), name

    def test_zero_epochs_writes_untrained_checkpoints(self, dataset, tmp_path):
        cfg = TrainConfig(**{**SMALL, "epochs_per_stage": 0})
        info = run_training(cfg, dataset, tmp_path)
        assert info["steps"] == 0
        s1, _ = load_model(tmp_path / "stage1.ckpt")
        s2, _ = load_model(tmp_path / "stage2.ckpt")
        reference = small_model(cfg)
        for (name, a), (_, b), (_, c) in zip(s1.named_parameters(),
                                             s2.named_parameters(),
                                             reference.named_parameters()):
            assert torch.equal(a, b) and torch.equal(a, c), name
        assert read_loss_log(info["loss_log"]) == []

    def test_partial_stage1_freezes_gates_and_thermal_head(self, dataset, tmp_path):
        cfg = TrainConfig(strategy="partial_sequential", **SMALL)
        model = small_model(cfg)
        gates_before = copy.deepcopy(model.hfm.state_dict())
        aux_t_before = copy.deepcopy(model.aux_thermal.state_dict())
        decoder_before = copy.deepcopy(model.decoder.state_dict())
        train_stage1(model, to_tensors(dataset), cfg, tmp_path)
        for key, tensor in model.hfm.state_dict().items():
            assert torch.equal(tensor, gates_before[key]), key
        for key, tensor in model.aux_thermal.state_dict().items():
            assert torch.equal(tensor, aux_t_before[key]), key
        changed = any(not torch.equal(t, decoder_before[k])
                      for k, t in model.decoder.state_dict().items())
        assert changed

    def test_full_stage1_trains_gates(self, dataset, tmp_path):
        cfg = TrainConfig(strategy="full_sequential", **SMALL)
        model = small_model(cfg)
        gates_before = copy.deepcopy(model.hfm.state_dict())
        train_stage1(model, to_tensors(dataset), cfg, tmp_path)
        changed = any(not torch.equal(t, gates_before[k])
                      for k, t in model.hfm.state_dict().items()
                      if k.endswith("weight"))
        assert changed

    def test_stage1_rejects_joint_strategy(self, dataset, tmp_path):
        cfg = TrainConfig(strategy="joint", **SMALL)
        with pytest.raises(ConfigurationError, match="sequential"):
            train_stage1(small_model(cfg), to_tensors(dataset), cfg, tmp_path)

    def test_stage2_refuses_mismatched_hyperparameters(self, dataset, tmp_path):
        cfg = TrainConfig(**SMALL)
        model = small_model(cfg)
        first = train_stage1(model, to_tensors(dataset), cfg, tmp_path)
        other = TrainConfig(**{**SMALL, "learning_rate": 0.01})
        with pytest.raises(ConfigurationError, match="identical settings"):
            train_stage2(model, first, to_tensors(dataset), other, tmp_path)

    def test_stage2_loads_checkpoint_from_disk(self, dataset, tmp_path):
        # zero-epoch phases isolate the load: stage 2 must start from the
        # stage-1 parameters on disk, not the freshly initialized model
        cfg = TrainConfig(**{**SMALL, "epochs_per_stage": 0})
        model = small_model(cfg)
        first = train_stage1(model, to_tensors(dataset), cfg, tmp_path)

        torch.manual_seed(99)
        fresh = SaliencyModel(model_config(cfg))
        assert not torch.equal(next(fresh.parameters()), next(model.parameters()))
        train_stage2(fresh, str(first["path"]), to_tensors(dataset), cfg, tmp_path)
        for (name, a), (_, b) in zip(fresh.named_parameters(),
                                     model.named_parameters()):
            assert torch.equal(a, b), name

    def test_stage2_rejects_incomplete_checkpoint(self, dataset, tmp_path):
        cfg = TrainConfig(**SMALL)
        model = small_model(cfg)
        first = train_stage1(model, to_tensors(dataset), cfg, tmp_path)
        payload = torch.load(first["path"], map_location="cpu", weights_only=True)
        clipped = dict(payload)
        clipped["state_dict"] = {k: v for k, v in payload["state_dict"].items()
                                 if "aux_thermal" not in k}
        with pytest.raises(ConfigurationError, match="lacks parameters"):
            train_stage2(small_model(cfg), clipped, to_tensors(dataset), cfg, tmp_path)

    def test_batch_larger_than_dataset(self, dataset, tmp_path):
        cfg = TrainConfig(**{**SMALL, "batch_size": 11})
        with pytest.raises(DataError, match="exceeds"):
            run_training(cfg, dataset, tmp_path)

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            run_training(TrainConfig(**SMALL), [], tmp_path)


class TestRunTraining:
    def test_step_counts_per_strategy(self, dataset, tmp_path):
        # 10 pairs, batch 10, 2 epochs/stage: sequential runs stage 2 plus an
        # extra pretraining stage; single-phase strategies run one stage
        counts = {}
        for strategy in STRATEGIES:
            cfg = TrainConfig(**{**SMALL, "strategy": strategy, "epochs_per_stage": 2})
            info = run_training(cfg, dataset, tmp_path / strategy)
            counts[strategy] = info["steps"]
        assert counts["full_sequential"] == counts["partial_sequential"] == 4
        assert counts["joint"] == counts["rgb_only"] == 2

    def test_loss_log_layout(self, dataset, tmp_path):
        cfg = TrainConfig(**SMALL)
        info = run_training(cfg, dataset, tmp_path)
        rows = read_loss_log(info["loss_log"])
        assert len(rows) == 2
        assert list(rows[0]) == list(LOG_COLUMNS)
        assert [r["stage"] for r in rows] == ["stage1", "stage2"]
        assert [r["step"] for r in rows] == ["1", "2"]
        # stage 1 supervises the final map and the RGB auxiliary map
        assert float(rows[0]["self_sup"]) == 0.0
        assert float(rows[0]["sup_thermal"]) == 0.0
        assert float(rows[0]["sup_rgb"]) > 0.0
        assert float(rows[0]["total"]) == pytest.approx(
            float(rows[0]["sup_final"]) + cfg.alpha * float(rows[0]["sup_rgb"]), rel=1e-5)
        assert float(rows[1]["self_sup"]) > 0.0

    def test_same_seed_byte_identical_logs(self, dataset, tmp_path):
        cfg = TrainConfig(**SMALL)
        run_training(cfg, dataset, tmp_path / "a")
        run_training(cfg, dataset, tmp_path / "b")
        log_a = (tmp_path / "a" / "loss_log.csv").read_bytes()
        log_b = (tmp_path / "b" / "loss_log.csv").read_bytes()
        assert log_a == log_b

    def test_different_seeds_differ(self, dataset, tmp_path):
        run_training(TrainConfig(**SMALL), dataset, tmp_path / "a")
        run_training(TrainConfig(**{**SMALL, "seed": 4}), dataset, tmp_path / "b")
        assert ((tmp_path / "a" / "loss_log.csv").read_bytes()
                != (tmp_path / "b" / "loss_log.csv").read_bytes())

    def test_hybrid_loss_off_uses_plain_supervision_in_stage2_wiring(self, dataset,
                                                                     tmp_path):
        cfg = TrainConfig(**{**SMALL, "strategy": "joint", "fusion": "add",
                             "hybrid_loss": False})
        info = run_training(cfg, dataset, tmp_path)
        rows = read_loss_log(info["loss_log"])
        assert all(float(r["self_sup"]) == 0.0 for r in rows)
        assert all(float(r["sup_rgb"]) == 0.0 for r in rows)
        assert all(float(r["total"]) == float(r["sup_final"]) for r in rows)

    def test_rgb_only_learns_a_clean_corpus(self, tmp_path):
        # with no darkening, noise, or thermal-only cues the RGB stream
        # suffices: the single-modality baseline clears MAE 0.1 held out
        easy = dict(darkness=0.0, noise_rgb=0.0, distractors=0.0)
        generate_synthetic(SynthConfig(n_samples=50, size=32, seed=5, **easy),
                           tmp_path / "train")
        generate_synthetic(SynthConfig(n_samples=20, size=32, seed=6, **easy),
                           tmp_path / "test")
        cfg = TrainConfig(**{**SMALL, "strategy": "rgb_only", "epochs_per_stage": 15})
        info = run_training(cfg, load_vt_dataset(tmp_path / "train"), tmp_path / "run")
        model, _ = load_model(info["checkpoints"][-1])
        model.eval()
        rgb, _, gt = to_tensors(load_vt_dataset(tmp_path / "test"))
        with torch.no_grad():
            maps = torch.sigmoid(model(rgb).final)
        scores = [mae(np.clip(maps[j, 0].double().numpy(), 0.0, 1.0),
                      gt[j, 0].double().numpy()) for j in range(maps.size(0))]
        assert float(np.mean(scores)) < 0.1

    def test_checkpoint_payload_fields(self, dataset, tmp_path):
        cfg = TrainConfig(**SMALL)
        run_training(cfg, dataset, tmp_path)
        payload = torch.load(tmp_path / "stage2.ckpt", map_location="cpu",
                             weights_only=True)
        assert payload["stage"] == "stage2"
        assert payload["config_hash"] == config_hash(cfg)
        assert payload["train_config"]["learning_rate"] == cfg.learning_rate
        assert payload["steps"] == 2
        model, _ = load_model(tmp_path / "stage2.ckpt",
                              expected_config=model_config(cfg))
        assert model.config.fusion == "gated"
