"""Run configuration: one INI file, sectioned, every key overridable.

Overrides use ``section.key=value``; the environment variable ``L2I_SEED``
replaces ``run.seed``. Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SEED_ENV = "L2I_SEED"


@dataclass
class RunSection:
    seed: int = 42


@dataclass
class DatasetSection:
    preset: str = "toy4"
    n_train: int = 0  # 0 keeps the preset's value
    n_test: int = 0
    clip_seconds: float = 0.0


@dataclass
class StftSection:
    fft_size: int = 1024
    hop: int = 512


@dataclass
class MelSection:
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 0.0  # 0 means Nyquist


@dataclass
class NmfSection:
    k: int = 20
    mu: float = 0.1
    chunk: int = 5
    max_iters: int = 400
    rel_tol: float = 1e-6
    k_noise: int = 10
    k_per_class: int = 10
    include_noise: bool = False


@dataclass
class ClassifierSection:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_halve_every: int = 0


@dataclass
class InterpreterSection:
    alpha: float = 10.0
    beta: float = 0.8
    l1_per_frame: bool = False
    lr: float = 5e-4
    epochs: int = 30
    batch_size: int = 16
    pooling: str = "att"
    attention_dim: int = 32


@dataclass
class InterpretSection:
    tau: float = 0.1


@dataclass
class PathsSection:
    data: str = ""
    dictionary: str = ""
    classifier: str = ""
    interpreter: str = ""
    out: str = ""


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    stft: StftSection = field(default_factory=StftSection)
    mel: MelSection = field(default_factory=MelSection)
    nmf: NmfSection = field(default_factory=NmfSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    interpreter: InterpreterSection = field(default_factory=InterpreterSection)
    interpret: InterpretSection = field(default_factory=InterpretSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        if self.interpreter.pooling not in ("att", "max"):
            raise ConfigError("interpreter.pooling must be att or max")
        if not 0 < self.interpret.tau <= 1:
            raise ConfigError("interpret.tau must lie in (0, 1]")
        if self.interpreter.alpha < 0 or self.interpreter.beta < 0:
            raise ConfigError("interpreter.alpha and interpreter.beta must be >= 0")
        if self.nmf.k < 1 or self.nmf.mu < 0 or self.nmf.chunk < 1:
            raise ConfigError("nmf.k >= 1, nmf.mu >= 0 and nmf.chunk >= 1 are required")
        return self


def _coerce(section: str, key: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def _set(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    sec = getattr(cfg, section, None)
    if sec is None or not dataclasses.is_dataclass(sec):
        raise ConfigError(f"unknown config section {section!r}")
    hints = typing.get_type_hints(type(sec))
    if key not in hints:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(sec, key, _coerce(section, key, raw, hints[key]))


def parse_override(text: str) -> tuple[str, str, str]:
    name, sep, value = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    return section, key, value


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _set(cfg, section, key, raw)
    for text in overrides:
        _set(cfg, *parse_override(text))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        _set(cfg, "run", "seed", env[SEED_ENV])
    return cfg.validate()


def write_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in cfg.to_dict().items():
        parser[section] = {k: str(v) for k, v in values.items()}
    with open(Path(path), "w") as fh:
        parser.write(fh)
