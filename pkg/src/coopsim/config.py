"""Experiment configuration: one JSON file resolves every knob of a run.

Missing keys fall back to the desk-scale preset, which is sized so that the
full experiment set trains on a single CPU core in a few hours.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .pipeline import ModelConfig
from .training import TrainConfig
from .world import ScenarioConfig, SensorConfig


@dataclass
class DataConfig:
    train_scenarios: int = 50
    test_scenarios: int = 10
    train_seed_offset: int = 0
    test_seed_offset: int = 10000

    def train_seeds(self) -> list[int]:
        return [self.train_seed_offset + k for k in range(self.train_scenarios)]

    def test_seeds(self) -> list[int]:
        return [self.test_seed_offset + k for k in range(self.test_scenarios)]


@dataclass
class EvalConfig:
    p_list: list[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(10)])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    conf_thresh: float = 0.05
    noise_p: float = 0.5
    # (sigma_t metres, sigma_r degrees) per level
    noise_levels: list[list[float]] = field(default_factory=lambda: [[0.0, 0.0], [0.2, 0.2], [0.4, 0.4],
                                                                      [0.6, 0.6], [0.8, 0.8]])
    history_ks: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    node_counts: list[int] = field(default_factory=lambda: [2, 3, 4, 5])
    ablation_p: list[float] = field(default_factory=lambda: [0.0, 0.3, 0.6, 0.9])


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=lambda: ScenarioConfig(map_extent=40.0))
    sensing: SensorConfig = field(default_factory=lambda: SensorConfig(window=32.0, cell=0.4, max_range=13.0))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(grid=80, cell=0.4, channels=8))
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12))
    student: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=8, ramp_epochs=6))
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.scenario.validate()
        self.model.validate()
        self.teacher.validate()
        self.student.validate()
        if self.sensing.grid != self.model.grid or abs(self.sensing.cell - self.model.cell) > 1e-9:
            raise ConfigurationError(f"sensor grid {self.sensing.grid}@{self.sensing.cell} does not match model "
                                     f"grid {self.model.grid}@{self.model.cell}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        base = cls()
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for f in fields(cls):
            current = getattr(base, f.name)
            parts[f.name] = _merge(current, raw.get(f.name, {}), f.name)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)


def _merge(current, overrides: dict, section: str):
    if not isinstance(overrides, dict):
        raise ConfigurationError(f"section {section!r} must be an object")
    names = {f.name: f for f in fields(current)}
    values = asdict(current)
    for key, val in overrides.items():
        if key not in names:
            raise ConfigurationError(f"unknown key {section}.{key}")
        if isinstance(values[key], tuple) and isinstance(val, list):
            val = tuple(val)
        values[key] = val
    try:
        return type(current)(**values)
    except TypeError as exc:
        raise ConfigurationError(f"section {section!r}: {exc}") from exc
