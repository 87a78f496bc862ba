"""Config parsing, layered overrides and whole-config validation."""

import json

import pytest

from snnforge.config import (
    ENV_PREFIX,
    ExperimentConfig,
    apply_env,
    apply_overrides,
    from_dict,
    load_config,
)
from snnforge.errors import ConfigError, MissingArtifactError


def valid_doc(**extra):
    doc = {"paths": {"data_dir": "/tmp/d", "out_dir": "/tmp/o"}}
    doc.update(extra)
    return doc


def write_config(tmp_path, doc):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.task == "shapes-seg"
    assert cfg.model.width_factor == 0.0625
    assert cfg.model.depth == 4
    assert cfg.synthetic.size == 64
    assert cfg.stats.percentile == 99.9
    assert cfg.conversion.mode == "connection"
    assert cfg.conversion.num_thresholds == 4
    assert cfg.simulation.num_steps == 20
    assert cfg.finetune.lr == 1e-6
    assert cfg.energy.mac_energy == 4.6e-12
    assert cfg.eval.left == "ann" and cfg.eval.right == "finetuned"


def test_load_config_and_to_dict_roundtrip(tmp_path):
    path = write_config(tmp_path, valid_doc(training={"lr": 0.01, "epochs": 3}))
    cfg = load_config(path)
    assert cfg.training.lr == 0.01
    assert cfg.training.epochs == 3
    assert cfg.training.optimizer == "adam"  # untouched default
    again = from_dict(cfg.to_dict())
    assert again == cfg


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(MissingArtifactError, match="no config file"):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "broken.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(bad)


def test_unknown_sections_and_keys_are_collected(tmp_path):
    doc = valid_doc(mystery={"a": 1}, training={"lr": 0.1, "momentum": 0.9})
    with pytest.raises(ConfigError) as err:
        from_dict(doc)
    msg = str(err.value)
    assert "unknown config section 'mystery'" in msg
    assert "unknown config key training.momentum" in msg


def test_type_coercion_rules():
    with pytest.raises(ConfigError, match="training.epochs must be an integer"):
        from_dict(valid_doc(training={"epochs": 2.5}))
    with pytest.raises(ConfigError, match="training.epochs must be an integer"):
        from_dict(valid_doc(training={"epochs": True}))
    with pytest.raises(ConfigError, match="task must be a string"):
        from_dict(valid_doc(task=3))
    with pytest.raises(ConfigError, match="must be a number"):
        from_dict(valid_doc(training={"lr": "fast"}))
    cfg = from_dict(valid_doc(training={"epochs": 3.0, "lr": 1}))
    assert cfg.training.epochs == 3 and isinstance(cfg.training.epochs, int)
    assert cfg.training.lr == 1.0 and isinstance(cfg.training.lr, float)


def test_env_overrides(tmp_path):
    path = write_config(tmp_path, valid_doc(training={"lr": 0.5}))
    env = {
        f"{ENV_PREFIX}TRAINING__LR": "0.25",
        f"{ENV_PREFIX}SIMULATION__NUM_STEPS": "33",
        f"{ENV_PREFIX}TASK": "denoise",
        f"{ENV_PREFIX}MODEL__OUT_CHANNELS": "1",
        "UNRELATED": "ignored",
    }
    cfg = load_config(path, environ=env)
    assert cfg.training.lr == 0.25
    assert cfg.simulation.num_steps == 33
    assert cfg.task == "denoise"


def test_env_requires_section_key_shape():
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError, match="SECTION__KEY"):
        apply_env(cfg, {f"{ENV_PREFIX}TRAINING": "x"})
    with pytest.raises(ConfigError, match="unknown config section"):
        apply_env(cfg, {f"{ENV_PREFIX}NOPE__LR": "1"})


def test_cli_overrides_win_over_env(tmp_path):
    path = write_config(tmp_path, valid_doc(training={"lr": 0.5}))
    env = {f"{ENV_PREFIX}TRAINING__LR": "0.25"}
    cfg = load_config(path, overrides=["training.lr=0.125"], environ=env)
    assert cfg.training.lr == 0.125


def test_override_parsing():
    cfg = ExperimentConfig()
    apply_overrides(cfg, ["task=denoise", "model.out_channels=1", "eval.left=converted"])
    assert cfg.task == "denoise"
    assert cfg.model.out_channels == 1
    assert cfg.eval.left == "converted"
    # values that are not JSON literals stay raw strings
    apply_overrides(cfg, ["paths.data_dir=/data/in"])
    assert cfg.paths.data_dir == "/data/in"
    with pytest.raises(ConfigError, match="section.key=value"):
        apply_overrides(cfg, ["training.lr"])
    with pytest.raises(ConfigError, match="section.key"):
        apply_overrides(cfg, ["lr=3"])


def test_validation_collects_every_violation():
    cfg = ExperimentConfig()
    cfg.task = "classify"
    cfg.model.depth = 0
    cfg.training.batch_size = 0
    cfg.stats.percentile = 0.0
    cfg.conversion.mode = "global"
    with pytest.raises(ConfigError) as err:
        cfg.validate()
    msg = str(err.value)
    for fragment in (
        "task must be one of",
        "model.depth must be >= 1",
        "training.batch_size must be >= 1",
        "stats.percentile",
        "conversion.mode",
        "paths.data_dir must be set",
    ):
        assert fragment in msg, fragment


def test_task_specific_validation(tmp_path):
    cfg = from_dict(valid_doc(task="denoise"))
    with pytest.raises(ConfigError, match="out_channels 3 != in_channels 1"):
        cfg.validate()
    cfg.model.out_channels = 1
    cfg.validate()

    seg = from_dict(valid_doc())
    seg.model.out_channels = 2
    with pytest.raises(ConfigError, match="3 classes"):
        seg.validate()


def test_size_must_divide_by_pool_depth():
    cfg = from_dict(valid_doc(synthetic={"size": 72}, model={"depth": 4}))
    with pytest.raises(ConfigError, match="divide by 2\\^depth"):
        cfg.validate()
    cfg.model.depth = 3
    cfg.validate()


def test_sigma_whitelist():
    cfg = from_dict(valid_doc(synthetic={"sigma": 30}))
    with pytest.raises(ConfigError, match="sigma"):
        cfg.validate()
