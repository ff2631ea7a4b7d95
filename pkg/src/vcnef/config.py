"""Declarative run configuration shared by the command-line tools.

A run config is a JSON object with the sections ``data``, ``model``,
``train`` and ``eval`` plus a root ``seed``. Unknown keys are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .model import ModelConfig
from .training import TrainConfig, config_hash


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    pde: str = "advection"
    n: int = 512
    s: int = 64
    n_t: int = 21
    t_final: float = 2.0
    params: list = field(default_factory=lambda: [0.4])
    n_modes: int = 5
    max_mode: int = 8
    amp_range: list = field(default_factory=lambda: [-0.5, 0.5])
    length: float = 1.0


@dataclass
class EvalConfig:
    batch_size: int = 64
    spatial_zssr: int | None = None
    temporal_zssr: int | None = None
    bench_steps: list = field(default_factory=lambda: [40, 80, 120, 160, 200, 240])
    bench_modes: list = field(default_factory=lambda: ["parallel", "sequential"])
    bench_warmup: int = 3
    bench_repeats: int = 5


SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}
# seeds come from the root seed, never from the sections
_DERIVED = {"model": {"seed"}, "train": {"seed"}}


def _section_keys(name: str) -> set[str]:
    return {f.name for f in fields(SECTIONS[name])} - _DERIVED.get(name, set())


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        data_seed, init_seed, train_seed = subsystem_seeds(self.seed)
        self.data_seed = data_seed
        self.model.seed = init_seed
        self.train.seed = train_seed

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunConfig:
        unknown = sorted(set(raw) - {"seed", *SECTIONS})
        for name in SECTIONS:
            section = raw.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            unknown += [f"{name}.{k}" for k in sorted(set(section) - _section_keys(name))]
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(unknown))
        try:
            kwargs = {name: SECTIONS[name](**raw.get(name, {})) for name in SECTIONS}
            return cls(seed=int(raw.get("seed", 0)), **kwargs)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> RunConfig:
        raw = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        for item in overrides or []:
            apply_override(raw, item)
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            for k in _DERIVED.get(name, ()):
                section.pop(k)
            out[name] = section
        return out

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def subsystem_seeds(root: int) -> tuple[int, int, int]:
    """Independent (data, init, training) seeds split from one root seed."""
    children = np.random.SeedSequence(root).spawn(3)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def apply_override(raw: dict, item: str) -> None:
    """Apply ``section.key=value`` (value parsed as JSON, else kept as a string)."""
    key, sep, value = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    parts = key.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r} descends into a non-object")
    node[parts[-1]] = parsed
