"""Flat ``key=value`` run configuration with ``#`` comments.

Values are kept as strings until a consumer converts them; unknown keys are
rejected at parse time.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig, VARIANTS, variant
from .train import TrainConfig

__all__ = ["RunConfig", "ConfigError", "parse_kv_text", "load_config_file", "MODEL_KEYS", "TRAIN_KEYS", "KNOWN_KEYS"]

MODEL_KEYS = {f.name for f in fields(ModelConfig)} | {"variant"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
DATA_KEYS = {"dataset", "data_path", "synth_classes", "synth_n", "synth_seed", "synth_size",
             "eval_n", "eval_seed"}
IO_KEYS = {"metrics", "checkpoint", "resume"}
GENERAL_KEYS = {"seed", "threads", "dtype"}
KNOWN_KEYS = MODEL_KEYS | TRAIN_KEYS | DATA_KEYS | IO_KEYS | GENERAL_KEYS

DEFAULTS = {
    "variant": "toy",
    "dataset": "synth",
    "synth_classes": "3",
    "synth_n": "300",
    "synth_seed": "1",
    "synth_size": "32",
    "eval_n": "300",
    "eval_seed": "2",
    "metrics": "metrics.csv",
    "checkpoint": "model.ckpt",
    "seed": "0",
    "dtype": "f32",
}


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config_file(path: str | os.PathLike) -> dict[str, str]:
    path = Path(path)
    return parse_kv_text(path.read_text(), str(path))


@dataclass
class RunConfig:
    """Defaults, then config-file values, then command-line flags."""

    values: dict[str, str] = field(default_factory=dict)
    explicit: set[str] = field(default_factory=set)

    @classmethod
    def build(cls, file_values: dict[str, str] | None = None, flag_values: dict[str, object] | None = None):
        values = dict(DEFAULTS)
        explicit = set()
        for source in (file_values or {}, flag_values or {}):
            for k, v in source.items():
                if v is None:
                    continue
                if k not in KNOWN_KEYS:
                    raise ConfigError(f"unknown key {k!r}")
                values[k] = ",".join(str(x) for x in v) if isinstance(v, (list, tuple)) else str(v)
                explicit.add(k)
        return cls(values, explicit)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def int(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else int(v)

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def dtype(self) -> str:
        return self.values["dtype"]

    def threads(self) -> int | None:
        v = self.values.get("threads") or os.environ.get("LIFMIXER_THREADS")
        return int(v) if v else None

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        name = self.values.get("variant", "toy")
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        kv = {k: v for k, v in self.values.items() if k in MODEL_KEYS and k != "variant" and k in self.explicit}
        if num_classes is not None and "num_classes" not in kv:
            kv["num_classes"] = str(num_classes)
        base = variant(name)
        merged = base.to_kv()
        merged.update(kv)
        try:
            return ModelConfig.from_kv(merged)
        except (KeyError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def train_config(self) -> TrainConfig:
        kv = {k: v for k, v in self.values.items() if k in TRAIN_KEYS}
        kv.setdefault("seed", self.values["seed"])
        try:
            return TrainConfig.from_kv(kv)
        except ValueError as e:
            raise ConfigError(str(e)) from e
