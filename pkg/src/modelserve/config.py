"""Plain key=value configuration for the service and CLI.

Unrecognized keys are rejected so typos fail loudly. The data directory can
always be overridden with the MODELSERVE_DATA_DIR environment variable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .core import ModelSchema
from .serving import EngineConfig

DATA_DIR_ENV = "MODELSERVE_DATA_DIR"


@dataclass
class ServiceConfig:
    data_dir: str = "./data"
    model: str = "default"
    dimension: int = 10
    regularization: float = 0.1
    exploration: float = 0.0
    shards: int = 4
    prediction_cache: int = 100_000
    feature_cache: int = 50_000
    flush_every: int = 1
    staleness_window: int = 500
    staleness_min_window: int = 100
    staleness_threshold: float = 0.05
    staleness_source: str = "all"
    auto_retrain: bool = False
    als_iterations: int = 15
    seed: int = 0
    host: str = "127.0.0.1"
    port: int = 8080

    def schema(self) -> ModelSchema:
        return ModelSchema(name=self.model, dimension=self.dimension,
                           regularization=self.regularization,
                           exploration=self.exploration)

    def engine_config(self) -> EngineConfig:
        return EngineConfig(
            num_shards=self.shards,
            prediction_cache=self.prediction_cache,
            feature_cache=self.feature_cache,
            flush_every=self.flush_every,
            staleness_window=self.staleness_window,
            staleness_min_window=self.staleness_min_window,
            staleness_threshold=self.staleness_threshold,
            staleness_source=self.staleness_source,
            auto_retrain=self.auto_retrain,
            als_iterations=self.als_iterations,
            als_seed=self.seed,
        )

    def resolved_data_dir(self) -> Path:
        return Path(os.environ.get(DATA_DIR_ENV, self.data_dir))


_ALIASES = {"lambda": "regularization", "alpha": "exploration"}


def _coerce(raw: str, target_type):
    if target_type is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{raw!r} is not a boolean")
    return target_type(raw)


def parse_config(text: str) -> ServiceConfig:
    cfg = ServiceConfig()
    by_name = {f.name: f for f in fields(ServiceConfig)}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {line_no}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = _ALIASES.get(key.strip(), key.strip())
        f = by_name.get(key)
        if f is None:
            raise ValueError(f"config line {line_no}: unknown key {key!r}")
        try:
            setattr(cfg, key, _coerce(value.strip(), f.type if isinstance(f.type, type) else type(getattr(cfg, key))))
        except ValueError as exc:
            raise ValueError(f"config line {line_no}: {exc}") from exc
    return cfg


def load_config(path) -> ServiceConfig:
    return parse_config(Path(path).read_text())
