"""Run configuration: JSON file -> dataclasses, with CLI flag overrides.

The JSON layout mirrors the dataclass nesting:

    {
      "seed": 0,
      "horizon": 30,
      "data": {"path": "runs/world", "val_fraction": 0.1, ...},
      "train": {"alpha": 0.6, "backbone": {"backbone": "deepfm", ...}, ...},
      "inference": {"policy": "policy1", "beta": 0.5, ...},
      "eval": {"k": [5, 10], "per_interval": false, "cold_start": false},
      "synthetic": {"n_users": 500, ...}
    }

Unknown keys are rejected so typos fail fast; flags always win over the
file. Defaults match the settings the acceptance tests are calibrated
against.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .backbones import BackboneConfig
from .dataio import ColumnConfig, SplitConfig
from .inference import FusionConfig
from .perceptron import RecencyConfig
from .synthetic import TopicSpec, WorldConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    path: str | None = None          # directory with train.csv/test.csv, or a single csv
    train_csv: str | None = None
    test_csv: str | None = None
    video_features_csv: str | None = None
    preset: str | None = None        # "synthetic" | "kuairand" | None (explicit columns)
    val_fraction: float = 0.1
    split: SplitConfig = dc_field(default_factory=SplitConfig)
    columns: ColumnConfig | None = None


@dataclass
class EvalConfig:
    k: list[int] = dc_field(default_factory=lambda: [5, 10])
    per_interval: bool = False
    cold_start: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    horizon: int = 30
    out_dir: str | None = None
    data: DataConfig = dc_field(default_factory=DataConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    fusion: FusionConfig = dc_field(default_factory=FusionConfig)
    eval: EvalConfig = dc_field(default_factory=EvalConfig)
    synthetic: WorldConfig = dc_field(default_factory=WorldConfig)

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        self.train.validate()
        self.fusion.validate(strict_beta=True)
        if 2 * self.train.window + 1 > self.horizon:
            raise ValueError(
                f"smoothing window {self.train.window} too wide for horizon {self.horizon}"
            )
        if not self.eval.k or any(k < 1 for k in self.eval.k):
            raise ValueError(f"eval k values must all be >= 1: {self.eval.k}")
        if not (0.0 <= self.data.val_fraction < 1.0):
            raise ValueError(f"val_fraction must be in [0,1): {self.data.val_fraction}")
        if self.data.preset not in (None, "synthetic", "kuairand"):
            raise ValueError(f"unknown data preset: {self.data.preset!r}")
        self.synthetic.validate()

    def effective_dict(self) -> dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj) if not f.name.startswith("_")}
            if isinstance(obj, (list, tuple)):
                return [convert(x) for x in obj]
            return obj

        return convert(self)


_SECTION_TYPES = {
    "data": DataConfig,
    "train": TrainConfig,
    "inference": FusionConfig,
    "eval": EvalConfig,
    "synthetic": WorldConfig,
}
_NESTED_FIELDS = {
    ("train", "backbone"): BackboneConfig,
    ("train", "recency"): RecencyConfig,
    ("data", "split"): SplitConfig,
    ("data", "columns"): ColumnConfig,
}
_SECTION_ATTR = {"inference": "fusion"}  # JSON section name -> RunConfig attribute


def _apply_payload(target, payload: dict, path: str) -> None:
    valid = {f.name for f in dataclasses.fields(target)}
    for key, value in payload.items():
        if key not in valid:
            raise ValueError(f"unknown config key: {path}.{key}")
        current = getattr(target, key)
        section = path.split(".")[-1] if "." in path else path
        nested_type = _NESTED_FIELDS.get((section, key))
        if nested_type is not None:
            if current is None:
                current = nested_type()
                setattr(target, key, current)
            if not isinstance(value, dict):
                raise ValueError(f"{path}.{key} must be an object")
            _apply_payload(current, value, f"{path}.{key}")
        elif key == "topics":
            setattr(target, key, [TopicSpec(**t) for t in value])
        elif isinstance(current, tuple) and isinstance(value, list):
            # Tuple-typed fields (backbone hidden sizes, split fractions)
            # arrive as JSON lists; plain-int fields named the same way
            # elsewhere must not be coerced.
            setattr(target, key, tuple(value))
        else:
            setattr(target, key, value)


def load_run_config(path: str | Path | None) -> RunConfig:
    """Build a RunConfig from defaults plus an optional JSON file."""
    config = RunConfig()
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    for key, value in payload.items():
        if key in ("seed", "horizon", "out_dir"):
            setattr(config, key, value)
        elif key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be an object")
            _apply_payload(getattr(config, _SECTION_ATTR.get(key, key)), value, key)
        else:
            raise ValueError(f"unknown config key: {key}")
    return config


def write_effective_config(config: RunConfig, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(
        json.dumps(config.effective_dict(), indent=2, sort_keys=True) + "\n"
    )
