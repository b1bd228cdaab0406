"""Experiment configuration: INI-style sections, named presets, flag overrides."""
from __future__ import annotations

import configparser
import copy
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .core import FastWeightConfig
from .optim import OptimizerSpec
from .trainer import TrainerConfig

EXPERIMENTS = ("wcst", "stream", "pretrain", "check")
MODELS = ("sparse-metanet", "baseline")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSection:
    experiment: str = "wcst"
    model: str = "sparse-metanet"
    seeds: list[int] = field(default_factory=lambda: [0])
    output: str = ""


@dataclass
class TrainerSection:
    k: int = 3
    gamma: float = 0.9
    beta1: float = 0.5
    beta2: float = 0.5
    p_train: float = 0.3
    p_eval: float = 0.3
    eval_gamma: float | None = None
    eval_beta1: float | None = None
    eval_beta2: float | None = None
    carry_mode: str = "carry"
    slow_optimizer: str = "adam"
    slow_lr: float = 0.001
    meta_optimizer: str = "adam"
    meta_lr: float = 0.001


@dataclass
class BaselineSection:
    protocol: str = "online"
    optimizer: str = "adam"
    lr: float = 0.001


@dataclass
class WcstSection:
    n_tasks: int = 60
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    max_episodes_per_task: int = 1000
    allow_same_task: bool = False
    discount: float = 0.9
    value_coef: float = 0.5
    entropy_coef: float = 0.01


@dataclass
class StreamSection:
    dataset: str = ""
    n_classes: int = 100
    per_class: int = 512
    feature_dim: int = 32
    data_seed: int = 1234
    hidden: list[int] = field(default_factory=lambda: [256, 128])
    fast_last: bool = False
    train_tasks: int = 300
    train_lengths: str = "15-30"
    eval_lengths: str = "1-15,20-35,40-55,60-75"
    eval_tasks: int = 400
    val_tasks: int = 30
    val_every: int = 100
    val_lengths: str = "1-15"
    batch_size: int = 32
    nb_perv: int = 2
    nb_kept: int = 1
    pretrain_epochs: int = 100
    patience: int = 5


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    wcst: WcstSection = field(default_factory=WcstSection)
    stream: StreamSection = field(default_factory=StreamSection)

    def validate(self) -> "ExperimentConfig":
        e = self.experiment
        if e.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {e.experiment!r}")
        if e.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {e.model!r}")
        if not e.seeds:
            raise ConfigError("seed list must not be empty")
        try:
            self.trainer_config(e.seeds[0])
            parse_ranges(self.stream.eval_lengths)
            parse_ranges(self.stream.train_lengths)
            parse_ranges(self.stream.val_lengths)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.stream.dataset:
            from pathlib import Path
            if not Path(self.stream.dataset).is_file():
                raise ConfigError(f"dataset file {self.stream.dataset!r} does not exist")
        return self

    def fast_config(self) -> FastWeightConfig:
        t = self.trainer
        return FastWeightConfig(t.gamma, t.beta1, t.beta2, t.p_train, t.p_eval, t.carry_mode,
                                t.eval_gamma, t.eval_beta1, t.eval_beta2)

    def trainer_config(self, seed: int) -> TrainerConfig:
        t = self.trainer
        return TrainerConfig(
            k=t.k, fast=self.fast_config(),
            slow_optimizer=OptimizerSpec(t.slow_optimizer, t.slow_lr),
            meta_optimizer=OptimizerSpec(t.meta_optimizer, t.meta_lr),
            seed=seed, eval_fast_only=True,
        )

    def baseline_optimizer(self) -> OptimizerSpec:
        return OptimizerSpec(self.baseline.optimizer, self.baseline.lr)


def parse_ranges(text: str) -> list[tuple[int, int]]:
    """``"1-15,20-35"`` -> ``[(1, 15), (20, 35)]``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, _, hi = part.partition("-")
        lo, hi = int(lo), int(hi or lo)
        if not 1 <= lo <= hi:
            raise ValueError(f"bad length range {part!r}")
        out.append((lo, hi))
    if not out:
        raise ValueError("empty length range list")
    return out


# -- (de)serialization ----------------------------------------------------------------


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(section: str, f: dataclasses.Field, raw: str):
    kind = str(f.type)
    raw = raw.strip()
    try:
        if "None" in kind and raw == "":
            return None
        if kind.startswith("list"):
            return [int(v) for v in raw.split(",") if v.strip()]
        if kind.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {f.name}: cannot parse {raw!r} as {kind}") from None


def to_ini(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    for sf in fields(cfg):
        sec = getattr(cfg, sf.name)
        cp[sf.name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def apply_values(cfg: ExperimentConfig, values: dict[str, dict[str, str]]) -> ExperimentConfig:
    sections = {sf.name: getattr(cfg, sf.name) for sf in fields(cfg)}
    for name, items in values.items():
        if name not in sections:
            raise ConfigError(f"unknown section [{name}]")
        sec = sections[name]
        known = {f.name: f for f in fields(sec)}
        for key, raw in items.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            setattr(sec, key, _coerce(name, known[key], raw))
    return cfg


def from_ini(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    values = {s: dict(cp[s]) for s in cp.sections()}
    preset_name = values.get("experiment", {}).pop("preset", None)
    if preset_name:
        cfg = preset(preset_name)
    return apply_values(cfg, values)


def override(cfg: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with ``section.key=value`` strings applied."""
    values: dict[str, dict[str, str]] = {}
    for a in assignments:
        key, eq, raw = a.partition("=")
        sec, dot, name = key.partition(".")
        if not eq or not dot:
            raise ConfigError(f"override {a!r} is not of the form section.key=value")
        values.setdefault(sec.strip(), {})[name.strip()] = raw
    return apply_values(copy.deepcopy(cfg), values)


# -- presets (published hyperparameter rows) ---------------------------------------------------


def preset(name: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    t = cfg.trainer
    if name == "wcst":
        cfg.experiment.experiment = "wcst"
        t.k, t.gamma, t.beta1, t.beta2, t.p_train, t.p_eval = 3, 0.9, 0.5, 0.5, 0.3, 0.3
    elif name in ("online-stream", "stream"):
        cfg.experiment.experiment = "stream"
        t.k, t.gamma, t.beta1, t.beta2, t.p_train, t.p_eval = 3, 0.99, 0.5, 0.5, 0.3, 0.5
    elif name == "enwik8":
        # language-model rows are kept for reference only; fast weights reset per window
        t.k, t.gamma, t.beta1, t.beta2, t.p_train = 5, 0.0, 0.0, 1.0, 0.05
        t.eval_gamma, t.eval_beta1, t.eval_beta2, t.p_eval = 0.999, 0.5, 0.5, 0.5
        t.carry_mode = "reset"
    elif name == "wt103":
        t.k, t.gamma, t.beta1, t.beta2, t.p_train = 4, 0.0, 0.0, 1.0, 0.05
        t.eval_gamma, t.eval_beta1, t.eval_beta2, t.p_eval = 0.999, 0.5, 0.5, 0.3
        t.carry_mode = "reset"
    else:
        raise ConfigError(f"unknown preset {name!r}; expected wcst, online-stream, enwik8, wt103")
    return cfg


PRESETS = ("wcst", "online-stream", "enwik8", "wt103")
