"""Configuration parsing, overrides, and validation tests."""

import dataclasses
import json

import pytest

from radprogress.config import (
    ConfigError,
    ExperimentConfig,
    ModelConfig,
    TrainConfig,
    apply_overrides,
    default_stage2_config,
    experiment_config_from_obj,
    experiment_config_to_obj,
    load_experiment_config,
    resolve_num_workers,
    toy_experiment_config,
)


class TestDefaults:
    def test_reference_model_defaults(self):
        mc = ModelConfig()
        assert mc.hidden_size == 768
        assert mc.top_k == 30
        assert mc.rgcn_layers == 3
        assert mc.gamma == 2.0
        assert mc.dropout == 0.1
        assert mc.max_steps == 64
        assert mc.obs_threshold == 0.5

    def test_reference_train_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.stage1.batch_size == 128
        assert cfg.stage1.lr_encoder == 1e-4
        assert cfg.stage1.alpha_d == 3.0
        assert cfg.stage2.batch_size == 32
        assert cfg.stage2.lr_encoder == 5e-5
        assert cfg.stage2.lr_rest == 1e-4
        assert cfg.stage2.epochs == 5
        assert cfg.stage2.lambda_gate == 0.5
        assert cfg.stage2.checkpoint_metric == "bleu4"

    def test_defaults_validate(self):
        ExperimentConfig().validate()
        toy_experiment_config().validate()

    def test_patch_count(self):
        assert ModelConfig().patch_count == (48 // 8) * (32 // 8)


class TestRoundTrip:
    def test_obj_round_trip(self):
        cfg = toy_experiment_config(seed=5)
        clone = experiment_config_from_obj(experiment_config_to_obj(cfg))
        assert clone == cfg

    def test_round_trip_with_optional_set(self):
        cfg = ExperimentConfig(
            stage1=TrainConfig(stage=1, stop_at_train_f1=0.9),
            stage2=dataclasses.replace(
                default_stage2_config(), stop_at_train_nll=0.05
            ),
        )
        clone = experiment_config_from_obj(experiment_config_to_obj(cfg))
        assert clone.stage1.stop_at_train_f1 == 0.9
        assert clone.stage2.stop_at_train_nll == 0.05

    def test_round_trip_with_optional_none(self):
        # Optional fields serialize as null and must come back as None.
        obj = experiment_config_to_obj(ExperimentConfig())
        assert obj["stage1"]["stop_at_train_f1"] is None
        clone = experiment_config_from_obj(obj)
        assert clone.stage1.stop_at_train_f1 is None

    def test_file_round_trip(self, tmp_path):
        cfg = toy_experiment_config()
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(experiment_config_to_obj(cfg)), encoding="utf-8")
        assert load_experiment_config(path) == cfg


class TestFromObj:
    def test_missing_sections_fall_back_to_defaults(self):
        cfg = experiment_config_from_obj({})
        assert cfg == ExperimentConfig()

    def test_partial_section_merges_with_stage_defaults(self):
        cfg = experiment_config_from_obj({"stage2": {"epochs": 9}})
        assert cfg.stage2.epochs == 9
        # Untouched keys keep the stage-2 defaults, not the stage-1 ones.
        assert cfg.stage2.batch_size == 32
        assert cfg.stage2.stage == 2

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="sections"):
            experiment_config_from_obj({"stage3": {}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            experiment_config_from_obj({"model": {"hidden": 4}})

    def test_wrong_type_rejected(self):
        with pytest.raises(ConfigError, match="integer"):
            experiment_config_from_obj({"model": {"hidden_size": "big"}})

    def test_bool_is_not_int(self):
        with pytest.raises(ConfigError, match="integer"):
            experiment_config_from_obj({"model": {"hidden_size": True}})

    def test_int_promotes_to_float(self):
        cfg = experiment_config_from_obj({"stage1": {"lr_rest": 1}})
        assert cfg.stage1.lr_rest == 1.0

    def test_null_for_required_key_rejected(self):
        with pytest.raises(ConfigError, match="null"):
            experiment_config_from_obj({"model": {"hidden_size": None}})

    def test_non_object_root_rejected(self):
        with pytest.raises(ConfigError, match="root"):
            experiment_config_from_obj([1, 2])

    def test_bad_file_json(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{nope", encoding="utf-8")
        with pytest.raises(ConfigError, match="valid JSON"):
            load_experiment_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_experiment_config(tmp_path / "absent.json")


class TestValidation:
    def test_heads_must_divide_hidden(self):
        with pytest.raises(ConfigError, match="multiple"):
            ModelConfig(hidden_size=30, num_heads=4).validate()

    def test_patch_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(image_height=50).validate()

    def test_max_positions_covers_max_steps(self):
        with pytest.raises(ConfigError, match="max_positions"):
            ModelConfig(max_steps=200, max_positions=100).validate()

    def test_bad_stage(self):
        with pytest.raises(ConfigError, match="stage"):
            TrainConfig(stage=3).validate()

    def test_bad_epochs(self):
        with pytest.raises(ConfigError, match="epochs"):
            TrainConfig(epochs=0).validate()

    def test_bad_validate_every(self):
        with pytest.raises(ConfigError, match="validate_every"):
            TrainConfig(validate_every=0).validate()

    def test_bad_lr(self):
        with pytest.raises(ConfigError, match="lr_rest"):
            TrainConfig(lr_rest=0.0).validate()

    def test_bad_ablation(self):
        with pytest.raises(ConfigError, match="ablation"):
            TrainConfig(ablation="no-graph").validate()

    def test_bad_checkpoint_metric(self):
        with pytest.raises(ConfigError, match="checkpoint_metric"):
            TrainConfig(checkpoint_metric="loss").validate()

    def test_swapped_stage_sections(self):
        cfg = ExperimentConfig(stage1=TrainConfig(stage=2))
        with pytest.raises(ConfigError, match="wrong stage"):
            cfg.validate()


class TestOverrides:
    def test_basic_override(self):
        cfg = apply_overrides(ExperimentConfig(), ["stage1.epochs=3"])
        assert cfg.stage1.epochs == 3

    def test_later_override_wins(self):
        cfg = apply_overrides(
            ExperimentConfig(), ["stage1.epochs=3", "stage1.epochs=7"]
        )
        assert cfg.stage1.epochs == 7

    def test_float_bool_and_none_parsing(self):
        cfg = apply_overrides(
            ExperimentConfig(),
            [
                "stage1.lr_rest=3e-3",
                "stage1.augment=false",
                "stage1.stop_at_train_f1=0.99",
            ],
        )
        assert cfg.stage1.lr_rest == 3e-3
        assert cfg.stage1.augment is False
        assert cfg.stage1.stop_at_train_f1 == 0.99
        cfg = apply_overrides(cfg, ["stage1.stop_at_train_f1=none"])
        assert cfg.stage1.stop_at_train_f1 is None

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            apply_overrides(ExperimentConfig(), ["stage1.epochs"])

    def test_missing_section_prefix_rejected(self):
        with pytest.raises(ConfigError, match="section prefix"):
            apply_overrides(ExperimentConfig(), ["epochs=3"])

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            apply_overrides(ExperimentConfig(), ["optim.lr=1"])

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            apply_overrides(ExperimentConfig(), ["stage1.learning_rate=1"])

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="cannot parse"):
            apply_overrides(ExperimentConfig(), ["stage1.epochs=three"])

    def test_result_is_validated(self):
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), ["stage1.epochs=0"])


class TestNumWorkers:
    def test_default_zero(self):
        assert resolve_num_workers({}) == 0

    def test_empty_string_is_default(self):
        assert resolve_num_workers({"RECAP_NUM_WORKERS": ""}) == 0

    def test_parses_integer(self):
        assert resolve_num_workers({"RECAP_NUM_WORKERS": "4"}) == 4

    def test_rejects_garbage(self):
        with pytest.raises(ConfigError):
            resolve_num_workers({"RECAP_NUM_WORKERS": "many"})

    def test_rejects_negative(self):
        with pytest.raises(ConfigError):
            resolve_num_workers({"RECAP_NUM_WORKERS": "-1"})
