"""Run configuration: one TOML file, nested sections, strict keys.

Any key may be overridden from the command line with ``--set section.key=value``
(the value is parsed as a TOML literal, falling back to a bare string). The
cache root can also be redirected with the ``STCFUSION_CACHE_ROOT`` variable.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .synth import CorpusSpec

CACHE_ENV = "STCFUSION_CACHE_ROOT"


@dataclass
class PathsConfig:
    data_root: str = "data"
    cache_root: str = "cache"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass
class IngestConfig:
    train_threshold: float = 0.5
    test_threshold: float = 0.4
    train_n: int = 18
    test_n: int = 24
    patch_size: int = 64
    flow_backend: str = "horn-schunck"
    flow_dir: str = ""
    hs_alpha: float = 0.5
    hs_iterations: int = 100
    hs_levels: int = 3
    hs_presmooth: float = 2.0

    def flow_params(self) -> dict:
        return {"alpha": self.hs_alpha, "iterations": self.hs_iterations,
                "levels": self.hs_levels, "presmooth": self.hs_presmooth}


@dataclass
class ModelConfig:
    latent_dim: int = 256
    memory_size: int = 100
    shrink_threshold: float = -1.0  # negative means 1 / memory_size
    renormalize: bool = False
    channels: list = field(default_factory=lambda: [32, 48, 64, 64])

    def threshold(self) -> float:
        return 1.0 / self.memory_size if self.shrink_threshold < 0 else self.shrink_threshold


@dataclass
class StreamTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    batching: str = "frame"  # "frame" or "target"
    epochs: int = 60
    lambda_recon: float = 1.0
    lambda_ent: float = 0.0002
    plateau_patience: int = 10
    plateau_tol: float = 1e-4


@dataclass
class TrainSection:
    spatial: StreamTrainConfig = field(default_factory=lambda: StreamTrainConfig(learning_rate=1e-3))
    temporal: StreamTrainConfig = field(default_factory=lambda: StreamTrainConfig(learning_rate=1e-4))


@dataclass
class EvalConfig:
    window: int = 10
    normalization: str = "literal"  # "literal" ((L - min) / max) or "minmax"
    batch_size: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: dict = field(default_factory=dict)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def path(self, name: str) -> Path:
        return Path(getattr(self.paths, name))

    def validate(self):
        if self.ingest.flow_backend not in ("horn-schunck", "precomputed"):
            raise ConfigError(f"unknown flow backend {self.ingest.flow_backend!r}")
        if self.eval.normalization not in ("literal", "minmax"):
            raise ConfigError(f"unknown normalization {self.eval.normalization!r}")
        for name in ("spatial", "temporal"):
            t = getattr(self.train, name)
            if t.learning_rate <= 0 or t.batch_size < 1 or t.epochs < 1:
                raise ConfigError(f"train.{name}: need learning_rate > 0, batch_size >= 1, epochs >= 1")
            if t.batching not in ("frame", "target"):
                raise ConfigError(f"train.{name}.batching must be 'frame' or 'target'")
        if self.ingest.train_n < 1 or self.ingest.test_n < 1:
            raise ConfigError("ingest n must be >= 1")
        if self.eval.window < 1:
            raise ConfigError("eval.window must be >= 1")
        if len(self.model.channels) != 4:
            raise ConfigError("model.channels needs four entries")
        CorpusSpec.from_dict({"seed": self.seed, **self.corpus}).validate()


def _build(defaults, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a table")
    fields = {f.name for f in dataclasses.fields(defaults)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(f'{where}{k}' for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(current, value, f"{where}{name}.")
        else:
            kwargs[name] = _coerce(value, current, f"{where}{name}")
    return dataclasses.replace(defaults, **kwargs)


def _coerce(value, current, where):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, (int, float, str, list, dict)) and not isinstance(value, type(current)):
        raise ConfigError(f"{where}: expected {type(current).__name__}, got {value!r}")
    return value


def _parse_value(text: str) -> Any:
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a table")
        node[parts[-1]] = _parse_value(text.strip())
    return data


def load_config(path=None, overrides=None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    data = apply_overrides(data, overrides)
    cfg = _build(RunConfig(), data, "")
    if os.environ.get(CACHE_ENV):
        cfg.paths.cache_root = os.environ[CACHE_ENV]
    cfg.validate()
    return cfg
