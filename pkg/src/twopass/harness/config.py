"""Experiment configuration: one YAML file drives every pipeline stage."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..frontend import ConfigError, DatasetConfig, default_dataset_config
from ..rnnt import EndpointerPenaltyConfig
from ..training import OptimizerConfig


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 8
    max_symbols_per_frame: int = 8
    eos_decode_penalty: float = 0.0


@dataclass(frozen=True)
class VadConfig:
    energy_threshold: float = 0.4
    silence_interval_ms: float = 300.0


@dataclass(frozen=True)
class MwerConfig:
    nbest: int = 4
    lambda_las: float = 0.5
    utterances: int = 300
    train: OptimizerConfig = OptimizerConfig(learning_rate=0.05, max_steps=300, batch_size=1, use_ema=False)


@dataclass(frozen=True)
class SweepGrid:
    eos_decode_penalties: tuple = (0.0, 1.0, 2.0, 4.0)
    lambdas: tuple = (0.0, 0.25, 0.5, 0.75)
    vad_intervals_ms: tuple = (200.0, 300.0, 500.0)


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: dict = field(default_factory=lambda: {"count": 3000, "seed": 1})
    eval: dict = field(default_factory=lambda: {"count": 500, "seed": 99})
    domain_onehot: bool = True
    rnnt: dict = field(default_factory=dict)
    endpointer: EndpointerPenaltyConfig = EndpointerPenaltyConfig(1.0, 1.0, 2, frozenset({0}))
    rnnt_train: OptimizerConfig = OptimizerConfig(learning_rate=0.1, momentum=0.9, max_steps=3750)
    baseline_train_steps: int = 2500  # the no-endpointer comparison model
    las: dict = field(default_factory=dict)
    las_train: OptimizerConfig = OptimizerConfig(learning_rate=0.1, momentum=0.9, max_steps=1500)
    mwer: MwerConfig = MwerConfig()
    decode: DecodeConfig = DecodeConfig()
    vad: VadConfig = VadConfig()
    sweep: SweepGrid = SweepGrid()

    def dataset_config(self) -> DatasetConfig:
        return default_dataset_config(**self.data_overrides())

    def data_overrides(self) -> dict:
        return {k: v for k, v in self.data.items()}

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["endpointer"]["enabled_domains"] = sorted(self.endpointer.enabled_domains)
        return _plain(out)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any] | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        try:
            for key in ("seed", "domain_onehot", "baseline_train_steps"):
                if key in raw:
                    kw[key] = raw[key]
            for key in ("data", "eval", "rnnt", "las"):
                if key in raw:
                    if not isinstance(raw[key], Mapping):
                        raise ConfigError(f"{key} must be a mapping")
                    kw[key] = dict(raw[key])
            if "endpointer" in raw:
                kw["endpointer"] = EndpointerPenaltyConfig(**raw["endpointer"])
            for key in ("rnnt_train", "las_train"):
                if key in raw:
                    kw[key] = OptimizerConfig(**raw[key])
            if "mwer" in raw:
                m = dict(raw["mwer"])
                if "train" in m:
                    m["train"] = OptimizerConfig(**m["train"])
                kw["mwer"] = MwerConfig(**m)
            if "decode" in raw:
                kw["decode"] = DecodeConfig(**raw["decode"])
            if "vad" in raw:
                kw["vad"] = VadConfig(**raw["vad"])
            if "sweep" in raw:
                kw["sweep"] = SweepGrid(**{k: tuple(v) for k, v in raw["sweep"].items()})
        except TypeError as exc:
            raise ConfigError(f"bad config section: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.decode.beam_size < 1 or self.decode.max_symbols_per_frame < 1:
            raise ConfigError("beam_size and max_symbols_per_frame must be >= 1")
        if self.vad.silence_interval_ms <= 0:
            raise ConfigError("vad silence interval must be positive")
        if not 0.0 <= self.mwer.lambda_las <= 1.0:
            raise ConfigError("mwer.lambda_las must lie in [0, 1]")
        if any(not 0.0 <= lam <= 1.0 for lam in self.sweep.lambdas):
            raise ConfigError("sweep lambdas must lie in [0, 1]")
        if int(self.eval.get("count", 1)) < 1:
            raise ConfigError("eval.count must be >= 1")
        try:
            self.dataset_config()
        except TypeError as exc:
            raise ConfigError(f"bad data section: {exc}") from exc

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))


def _plain(x):
    if isinstance(x, Mapping):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, frozenset, set)):
        return [_plain(v) for v in (sorted(x) if isinstance(x, (set, frozenset)) else x)]
    return x


def load_experiment_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    return ExperimentConfig.from_dict(raw)
