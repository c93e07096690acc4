"""Run configuration: JSON config file plus flag overrides.

Precedence is flag > file > default.  File keys are flat and match the
:class:`~tangnn.training.TrainConfig` field names; dataset paths are
resolved relative to the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .graph import Graph, load_graph, load_manifest
from .training import TrainConfig

VARIANT_ALIASES = {
    "tangnn": "tangnn",
    "tangnn-lc": "lc", "lc": "lc",
    "tangnn-flc": "flc", "flc": "flc",
    "tangnn-nai": "nai", "nai": "nai",
    "tangnn-tai": "tai", "tai": "tai",
}

TASK_ALIASES = {
    "node": "node", "link": "link",
    "sentiment": "sentiment", "regression": "regression",
}


def normalize_variant(name: str) -> str:
    key = str(name).lower()
    if key not in VARIANT_ALIASES:
        raise ConfigError(f"unknown variant {name!r}; "
                          f"choose from tangnn|lc|flc|nai|tai")
    return VARIANT_ALIASES[key]


def parse_fanouts(value) -> tuple:
    if isinstance(value, (list, tuple)):
        items = value
    else:
        items = str(value).replace("[", "").replace("]", "").split(",")
    try:
        fanouts = tuple(int(str(v).strip()) for v in items if str(v).strip())
    except ValueError:
        raise ConfigError(f"fanouts must be integers, got {value!r}")
    if not fanouts:
        raise ConfigError("fanouts must not be empty")
    return fanouts


@dataclass
class RunConfig:
    """TrainConfig plus dataset location, split fraction, and output directory."""

    train: TrainConfig
    train_frac: float = 0.5
    edge_path: Path | None = None
    feature_path: Path | None = None
    label_path: Path | None = None
    manifest_path: Path | None = None
    directed: bool = False
    dataset_name: str = "dataset"
    out_dir: Path = Path("runs")
    split_path: Path | None = None
    sampled_inference: bool = False

    def validate_paths(self) -> None:
        if self.train.task == "regression":
            if self.manifest_path is None:
                raise ConfigError("regression runs need 'manifest_path'")
            if not Path(self.manifest_path).exists():
                raise ConfigError(f"manifest not found: {self.manifest_path}")
            return
        for name in ("edge_path", "feature_path"):
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"config is missing '{name}'")
            if not Path(value).exists():
                raise ConfigError(f"{name} not found: {value}")
        if self.label_path is not None and not Path(self.label_path).exists():
            raise ConfigError(f"label_path not found: {self.label_path}")
        if self.split_path is not None and not Path(self.split_path).exists():
            raise ConfigError(f"split_path not found: {self.split_path}")

    def load_dataset(self):
        if self.train.task == "regression":
            return load_manifest(self.manifest_path)
        return load_graph(self.edge_path, self.feature_path,
                          self.label_path, directed=self.directed)

    def split_level(self) -> str:
        return {"node": "node", "link": "edge",
                "sentiment": "edge", "regression": "graph"}[self.train.task]


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_RUN_FIELDS = {"train_frac", "edge_path", "feature_path", "label_path",
               "manifest_path", "directed", "dataset_name", "out_dir",
               "split_path", "sampled_inference"}


def load_run_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, the JSON config file, and CLI overrides."""
    values: dict = {}
    base = Path(".")
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        base = path.parent
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
        if not isinstance(file_values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        values.update(file_values)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    unknown = set(values) - _TRAIN_FIELDS - _RUN_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    train_kwargs = {k: values[k] for k in _TRAIN_FIELDS if k in values}
    if "variant" in train_kwargs:
        train_kwargs["variant"] = normalize_variant(train_kwargs["variant"])
    if "fanouts" in train_kwargs:
        train_kwargs["fanouts"] = parse_fanouts(train_kwargs["fanouts"])
    if "task" in train_kwargs:
        task = str(train_kwargs["task"]).lower()
        if task not in TASK_ALIASES:
            raise ConfigError(f"unknown task {task!r}")
        train_kwargs["task"] = TASK_ALIASES[task]
    try:
        train = TrainConfig(**train_kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}")
    train.validate()

    run_kwargs: dict = {}
    for key in _RUN_FIELDS & set(values):
        run_kwargs[key] = values[key]
    for key in ("edge_path", "feature_path", "label_path", "manifest_path",
                "split_path", "out_dir"):
        if run_kwargs.get(key) is not None:
            p = Path(run_kwargs[key])
            run_kwargs[key] = p if p.is_absolute() else base / p
    if "train_frac" in run_kwargs:
        frac = float(run_kwargs["train_frac"])
        if not (0.0 < frac < 1.0):
            raise ConfigError(f"train_frac must be in (0,1), got {frac}")
        run_kwargs["train_frac"] = frac
    return RunConfig(train=train, **run_kwargs)
