"""Run configuration: a TOML file mirroring :class:`RunConfig` section by section.

Unknown keys, wrong types and non-positive counts are configuration errors.
Relative data paths are resolved against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from groupbnn.architecture import MODULE_KINDS, ConfigurationError, NetworkConfig, mobilenet_config
from groupbnn.evolution import SearchConfig
from groupbnn.training_engine import TrainConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass
class DataSection:
    name: str = "mnist"  # "mnist" (IDX files) or "cifar10" (binary batches)
    path: str = "data/mnist"
    val_size: int = 5000

    def __post_init__(self):
        if self.name not in ("mnist", "cifar10"):
            raise ConfigurationError(f"data.name must be 'mnist' or 'cifar10', got {self.name!r}")
        if self.val_size < 1:
            raise ConfigurationError("data.val_size must be positive")


@dataclass
class ModelSection:
    module_kind: str = "M1"
    width_multiplier: float = 0.25
    stem_stride: int = 2

    def __post_init__(self):
        if self.module_kind not in MODULE_KINDS:
            raise ConfigurationError(f"model.module_kind must be one of {MODULE_KINDS}")
        if not self.width_multiplier > 0:
            raise ConfigurationError("model.width_multiplier must be positive")
        if self.stem_stride not in (1, 2):
            raise ConfigurationError("model.stem_stride must be 1 or 2")


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    weight_decay: float = 0.0
    eval_batch_size: int = 1000

    def __post_init__(self):
        if self.batch_size < 2 or self.eval_batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 2 and eval_batch_size >= 1")
        try:
            self.to_train_config(1)
        except ValueError as exc:
            raise ConfigurationError(f"train: {exc}") from exc

    def to_train_config(self, total_steps: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon,
                           total_steps, self.batch_size, self.weight_decay)


@dataclass
class SearchSection:
    population_size: int = 50
    top_k: int = 10
    num_crossover: int = 25
    num_mutation: int = 25
    max_iterations: int = 20
    flop_budget: float = math.inf
    mutation_prob: float = 0.1
    max_retries: int = 100
    fitness_samples: int = 1024
    calibration_size: int = 256
    random_controls: int = 50
    workers: int = 1

    def __post_init__(self):
        if self.fitness_samples < 1 or self.calibration_size < 2 or self.workers < 1:
            raise ConfigurationError("search: fitness_samples, calibration_size and workers must be positive")
        if self.random_controls < 0:
            raise ConfigurationError("search.random_controls must be >= 0")
        self.to_search_config(0)

    def to_search_config(self, seed: int) -> SearchConfig:
        return SearchConfig(self.population_size, self.top_k, self.num_crossover,
                            self.num_mutation, self.max_iterations, self.flop_budget,
                            self.mutation_prob, self.max_retries, seed)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    search: SearchSection = field(default_factory=SearchSection)
    supernet_epochs: int = 5
    retrain_epochs: int = 20
    out_dir: str = "runs/desk"
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.supernet_epochs < 1 or self.retrain_epochs < 1:
            raise ConfigurationError("supernet_epochs and retrain_epochs must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    def network_config(self, in_channels: int, input_size, num_classes: int) -> NetworkConfig:
        m = self.model
        return mobilenet_config(m.module_kind, m.width_multiplier, input_size, in_channels,
                                num_classes, m.stem_stride)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection,
             "search": SearchSection}


def _coerce(cls, name, key, value, expected):
    where = f"{name}.{key}" if name else key
    if expected == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number, got {value!r}")
        return float(value)
    if expected == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer, got {value!r}")
        return value
    if expected == "bool":
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true or false, got {value!r}")
        return value
    if expected == "str":
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string, got {value!r}")
        return value
    raise ConfigurationError(f"{where}: unsupported field type {expected}")


def _build(cls, table: dict, name: str = ""):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(fields))
    if unknown:
        prefix = f"[{name}] " if name else ""
        raise ConfigurationError(f"{prefix}unknown keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in table.items():
        if key in _SECTIONS and not name:
            if not isinstance(value, dict):
                raise ConfigurationError(f"[{key}] must be a table")
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = _coerce(cls, name, key, value, fields[key].type)
    return cls(**kwargs)


def run_config_from_dict(doc: dict) -> RunConfig:
    return _build(RunConfig, doc)


def load_run_config(path) -> RunConfig:
    """Parse and validate a TOML run config; ``data.path`` must exist."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    run = run_config_from_dict(doc)
    data_path = Path(run.data.path)
    if not data_path.is_absolute():
        data_path = (path.parent / data_path).resolve()
    if not data_path.exists():
        raise ConfigurationError(f"data.path does not exist: {data_path}")
    run.data.path = str(data_path)
    return run


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, int):
        return str(v)
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_run_config(run: RunConfig) -> str:
    d = run.to_dict()
    lines = [f"{k} = {_toml_value(v)}" for k, v in d.items() if k not in _SECTIONS]
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in d[section].items())
    return "\n".join(lines) + "\n"
