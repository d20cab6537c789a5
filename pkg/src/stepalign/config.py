"""Run configuration: one JSON object covering corpus, model, and training.

Strict by design: unknown keys are rejected with the offending name, because
a silently ignored typo in an experiment config costs hours. Absent sections
and absent keys fall back to dataclass defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .corpus.records import CorpusError
from .corpus.synth import SynthConfig
from .encoder import ModelConfig, ModelError
from .objective import LossConfig
from .pseudolabel import PseudoConfig, PseudoError
from .trainer import TrainConfig, TrainError


class ConfigError(ValueError):
    pass


def build_section(cls, data: dict, where: str):
    """Instantiate a config dataclass from a JSON object, strictly."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


@dataclass(frozen=True)
class RunConfig:
    corpus: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)

    def validate(self) -> None:
        try:
            self.corpus.validate()
            self.model.validate()
            self.train.validate()
            self.loss.validate()
            self.pseudo.validate()
        except (CorpusError, ModelError, TrainError, PseudoError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return {"corpus": asdict(self.corpus), "model": asdict(self.model),
                "train": asdict(self.train), "loss": asdict(self.loss),
                "pseudo": asdict(self.pseudo)}


_SECTIONS = {"corpus": SynthConfig, "model": ModelConfig, "train": TrainConfig,
             "loss": LossConfig, "pseudo": PseudoConfig}


def run_config_from_dict(data: dict, where: str = "config") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a top-level object")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"{where}: unknown sections {unknown}")
    parts = {name: build_section(cls, data.get(name, {}), f"{where}.{name}")
             for name, cls in _SECTIONS.items()}
    config = RunConfig(**parts)
    config.validate()
    return config


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return run_config_from_dict(data, where=str(path))


def save_run_config(config: RunConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2)
        f.write("\n")
