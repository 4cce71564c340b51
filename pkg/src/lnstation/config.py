"""Experiment configuration: nested dataclasses with strict JSON loading.

Unknown keys anywhere in a config file are refused rather than
silently ignored; that is the difference between a typo'd experiment
and a wrong one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .detect_branch import DetectorConfig
from .errors import ConfigError
from .neural import TrainConfig
from .phantom import IntensityModel, PhantomConfig
from .station_branch import StationBranchConfig


@dataclass
class AblationConfig:
    use_station_features: bool = True
    use_distance_features: bool = True
    use_gcn: bool = True


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    n_patients: int = 60
    train_fraction: float = 2.0 / 3.0
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    station_model: StationBranchConfig = field(default_factory=StationBranchConfig)
    detector_model: DetectorConfig = field(default_factory=DetectorConfig)
    station_train: TrainConfig = field(default_factory=TrainConfig)
    detector_train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.n_patients < 0:
            raise ConfigError(f"n_patients must be >= 0, got {self.n_patients}")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError(f"train_fraction must be in [0, 1], got {self.train_fraction}")
        self.station_model.use_gcn = self.ablation.use_gcn
        self.detector_model.use_station_features = self.ablation.use_station_features
        self.detector_model.use_distance_features = self.ablation.use_distance_features


_NESTED = {
    ExperimentConfig: {
        "phantom": PhantomConfig,
        "station_model": StationBranchConfig,
        "detector_model": DetectorConfig,
        "station_train": TrainConfig,
        "detector_train": TrainConfig,
        "ablation": AblationConfig,
    },
    PhantomConfig: {"intensity": IntensityModel},
}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config: expected an object at {path}, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown} at {path}")
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for name, value in data.items():
        if name in nested and value is not None:
            kwargs[name] = _build(nested[name], value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: invalid values at {path}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    profile = data.get("profile", "desk")
    base = config_profile(profile)
    merged = _merge(dataclasses.asdict(base), data)
    return _build(ExperimentConfig, merged, "$")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: no file at {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config: top level of {path} must be an object")
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def config_profile(name: str) -> ExperimentConfig:
    """Named baseline configs.

    ``desk``: 64-cube volumes, 60 patients (40/20 split), 20 epochs with
    proportionally scaled lr drops; runs end to end on a laptop CPU.
    ``full``: the complete recipe (96-cube grid, 48/96-cube patches,
    100 epochs, batch 128, drops at 30/50/70); hours of CPU time.
    """
    if name == "desk":
        return ExperimentConfig(
            profile="desk",
            n_patients=60,
            phantom=PhantomConfig(dims=(64, 64, 64), spacing=(2.0, 2.0, 2.0)),
            station_model=StationBranchConfig(patch_size=24),
            detector_model=DetectorConfig(patch_size=16),
            station_train=TrainConfig(
                epochs=20, batch_size=4, lr=0.003, lr_drop_epochs=(10, 15, 18)
            ),
            detector_train=TrainConfig(
                epochs=20, batch_size=32, lr_drop_epochs=(10, 15, 18)
            ),
        )
    if name == "full":
        return ExperimentConfig(
            profile="full",
            n_patients=60,
            phantom=PhantomConfig(dims=(96, 96, 96)),
            station_model=StationBranchConfig(patch_size=96),
            detector_model=DetectorConfig(patch_size=48),
            station_train=TrainConfig(epochs=100, batch_size=8, lr_drop_epochs=(30, 50, 70)),
            detector_train=TrainConfig(epochs=100, batch_size=128, lr_drop_epochs=(30, 50, 70)),
        )
    raise ConfigError(f"config: unknown profile {name!r} (expected 'desk' or 'full')")
