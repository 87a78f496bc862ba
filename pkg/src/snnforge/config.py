"""Experiment configuration: JSON file, environment and flag overrides.

Precedence is file < environment < command-line overrides.  Environment
variables use the prefix SNNFORGE_ with double underscores between section
and key (SNNFORGE_TRAINING__LR=0.01); command-line overrides are dotted
(training.lr=0.01).  Validation collects every violation before failing so
a bad config is fixed in one round.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError, MissingArtifactError

ENV_PREFIX = "SNNFORGE_"

TASKS = ("shapes-seg", "denoise")
MODES = ("layerwise", "connection")
OPTIMIZERS = ("adam", "sgd")
NETWORK_CHOICES = ("ann", "converted", "finetuned")


@dataclass
class ModelSection:
    width_factor: float = 0.0625
    in_channels: int = 1
    out_channels: int = 3
    depth: int = 4


@dataclass
class SyntheticSection:
    train_count: int = 500
    test_count: int = 100
    size: int = 64
    seed: int = 7
    sigma: int = 25


@dataclass
class TrainingSection:
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 8
    batch_size: int = 8
    seed: int = 0


@dataclass
class StatsSection:
    percentile: float = 99.9


@dataclass
class ConversionSection:
    mode: str = "connection"
    num_thresholds: int = 4
    v_max: float = 1.0


@dataclass
class SimulationSection:
    num_steps: int = 20
    sample_count: int = 4
    network: str = "converted"


@dataclass
class FinetuneSection:
    lr: float = 1e-6
    epochs: int = 1
    num_steps: int = 20
    batch_size: int = 4
    optimizer: str = "adam"
    seed: int = 0


@dataclass
class EnergySection:
    mac_energy: float = 4.6e-12
    ac_energy: float = 0.9e-12
    mem_access_energy: float = 1.0e-11
    flops_access_factor: float = 2.0
    param_access_factor: float = 1.0
    sample_count: int = 4
    network: str = "converted"


@dataclass
class EvalSection:
    left: str = "ann"
    right: str = "finetuned"
    batch_size: int = 8


@dataclass
class PathsSection:
    data_dir: str = ""
    out_dir: str = ""


@dataclass
class ExperimentConfig:
    task: str = "shapes-seg"
    model: ModelSection = field(default_factory=ModelSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    stats: StatsSection = field(default_factory=StatsSection)
    conversion: ConversionSection = field(default_factory=ConversionSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    energy: EnergySection = field(default_factory=EnergySection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        """Raise ConfigError listing every violation."""
        bad: list[str] = []

        def check(cond: bool, msg: str) -> None:
            if not cond:
                bad.append(msg)

        check(self.task in TASKS, f"task must be one of {TASKS}, got {self.task!r}")
        m = self.model
        check(m.width_factor > 0, f"model.width_factor must be > 0, got {m.width_factor}")
        check(m.in_channels >= 1, f"model.in_channels must be >= 1, got {m.in_channels}")
        check(m.out_channels >= 1, f"model.out_channels must be >= 1, got {m.out_channels}")
        check(m.depth >= 1, f"model.depth must be >= 1, got {m.depth}")
        if self.task == "shapes-seg":
            check(
                m.out_channels >= 3,
                f"shapes-seg has 3 classes; model.out_channels {m.out_channels} is too small",
            )
        if self.task == "denoise":
            check(
                m.out_channels == m.in_channels,
                "denoise predicts a residual per input channel; "
                f"out_channels {m.out_channels} != in_channels {m.in_channels}",
            )
        s = self.synthetic
        check(s.train_count >= 0, f"synthetic.train_count must be >= 0, got {s.train_count}")
        check(s.test_count >= 0, f"synthetic.test_count must be >= 0, got {s.test_count}")
        check(s.size >= 8, f"synthetic.size must be >= 8, got {s.size}")
        if m.depth >= 1 and s.size >= 8:
            check(
                s.size % (2**m.depth) == 0,
                f"synthetic.size {s.size} must divide by 2^depth = {2**m.depth}",
            )
        check(s.sigma in (15, 25, 50), f"synthetic.sigma must be in (15, 25, 50), got {s.sigma}")
        t = self.training
        check(t.optimizer in OPTIMIZERS, f"training.optimizer must be in {OPTIMIZERS}")
        check(t.lr >= 0, f"training.lr must be >= 0, got {t.lr}")
        check(t.epochs >= 0, f"training.epochs must be >= 0, got {t.epochs}")
        check(t.batch_size >= 1, f"training.batch_size must be >= 1, got {t.batch_size}")
        check(
            0 < self.stats.percentile <= 100,
            f"stats.percentile must be in (0, 100], got {self.stats.percentile}",
        )
        c = self.conversion
        check(c.mode in MODES, f"conversion.mode must be in {MODES}, got {c.mode!r}")
        check(c.num_thresholds >= 1, f"conversion.num_thresholds must be >= 1")
        check(c.v_max > 0, f"conversion.v_max must be > 0, got {c.v_max}")
        check(self.simulation.num_steps >= 1, "simulation.num_steps must be >= 1")
        check(self.simulation.sample_count >= 1, "simulation.sample_count must be >= 1")
        check(
            self.simulation.network in ("converted", "finetuned"),
            "simulation.network must be 'converted' or 'finetuned'",
        )
        f_ = self.finetune
        check(f_.lr >= 0, f"finetune.lr must be >= 0, got {f_.lr}")
        check(f_.epochs >= 0, f"finetune.epochs must be >= 0, got {f_.epochs}")
        check(f_.num_steps >= 1, f"finetune.num_steps must be >= 1, got {f_.num_steps}")
        check(f_.batch_size >= 1, f"finetune.batch_size must be >= 1, got {f_.batch_size}")
        check(f_.optimizer in OPTIMIZERS, f"finetune.optimizer must be in {OPTIMIZERS}")
        e = self.energy
        check(e.mac_energy > 0, "energy.mac_energy must be > 0")
        check(e.ac_energy > 0, "energy.ac_energy must be > 0")
        check(e.mem_access_energy > 0, "energy.mem_access_energy must be > 0")
        check(e.flops_access_factor >= 0, "energy.flops_access_factor must be >= 0")
        check(e.param_access_factor >= 0, "energy.param_access_factor must be >= 0")
        check(e.sample_count >= 1, "energy.sample_count must be >= 1")
        check(
            e.network in ("converted", "finetuned"),
            "energy.network must be 'converted' or 'finetuned'",
        )
        ev = self.eval
        check(ev.left in NETWORK_CHOICES, f"eval.left must be in {NETWORK_CHOICES}")
        check(ev.right in NETWORK_CHOICES, f"eval.right must be in {NETWORK_CHOICES}")
        check(ev.batch_size >= 1, "eval.batch_size must be >= 1")
        check(bool(self.paths.data_dir), "paths.data_dir must be set")
        check(bool(self.paths.out_dir), "paths.out_dir must be set")
        if bad:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(bad))


_SECTIONS = {
    f.name: f.default_factory  # type: ignore[misc]
    for f in fields(ExperimentConfig)
    if f.name != "task"
}


def _coerce(section: str, key: str, value, target):
    if isinstance(target, bool):
        raise ConfigError(f"{section}.{key}: boolean options are not used")
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(value, bool) or (isinstance(value, float) and value != int(value)):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
    if isinstance(target, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
    if isinstance(target, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string, got {value!r}")
        return value
    return value


def _apply(cfg: ExperimentConfig, section: str, key: str, value) -> None:
    if section == "" and key == "task":
        cfg.task = _coerce("", "task", value, cfg.task)
        return
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    sec = getattr(cfg, section)
    if not hasattr(sec, key):
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(sec, key, _coerce(section, key, value, getattr(sec, key)))


def from_dict(doc: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    problems: list[str] = []
    for section, body in doc.items():
        if section == "task":
            try:
                _apply(cfg, "", "task", body)
            except ConfigError as exc:
                problems.append(str(exc))
            continue
        if section not in _SECTIONS:
            problems.append(f"unknown config section {section!r}")
            continue
        if not isinstance(body, dict):
            problems.append(f"section {section!r} must be an object")
            continue
        for key, value in body.items():
            try:
                _apply(cfg, section, key, value)
            except ConfigError as exc:
                problems.append(str(exc))
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def _parse_literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_env(cfg: ExperimentConfig, environ=None) -> None:
    env = os.environ if environ is None else environ
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        if rest == "task":
            _apply(cfg, "", "task", _parse_literal(raw))
            continue
        if "__" not in rest:
            raise ConfigError(
                f"environment override {name} must look like "
                f"{ENV_PREFIX}SECTION__KEY"
            )
        section, key = rest.split("__", 1)
        _apply(cfg, section, key, _parse_literal(raw))


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, raw = item.split("=", 1)
        if path == "task":
            _apply(cfg, "", "task", _parse_literal(raw))
            continue
        if "." not in path:
            raise ConfigError(f"override key {path!r} must look like section.key")
        section, key = path.split(".", 1)
        _apply(cfg, section, key, _parse_literal(raw))


def load_config(path, overrides: list[str] | None = None, environ=None) -> ExperimentConfig:
    """File, then environment, then explicit overrides; validated at the end."""
    if not os.path.exists(path):
        raise MissingArtifactError(f"no config file at {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
    cfg = from_dict(doc)
    apply_env(cfg, environ)
    apply_overrides(cfg, overrides or [])
    cfg.validate()
    return cfg
