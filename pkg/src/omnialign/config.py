"""Run configuration: one JSON document with one section per pipeline stage.

Parsing is strict: unknown keys anywhere in the tree are rejected by
their full dotted path, and scalar types must match the schema (ints
stay ints, bools stay bools). The effective config - defaults plus file
plus overrides - hashes to a short hex digest that every artifact
embeds, so outputs are traceable to the exact settings that produced
them.
"""

import collections.abc
import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .errors import ConfigError, ContractViolation
from .evalkit import EvalOptions
from .synth import WorldConfig
from .trainer import Toggles, TrainConfig

# Hyperparameters the sweep command may grid over.
SWEEPABLE = ("tau_init", "gamma_plus", "lambda_coral", "rho_init", "rho_final", "t0")


@dataclass(frozen=True)
class DiagnoseOptions:
    queries: int = 1000  # eval queries used for the diagnostics
    targets: int = 2000  # target-pool rows (positives first, then hard negatives)
    heatmap_dim: int = 32
    projection_seed: int = 7
    svg: bool = True
    compare_checkpoint: Optional[str] = None  # overlay a second trained model

    def __post_init__(self):
        if self.queries < 2 or self.targets < 2:
            raise ContractViolation("diagnose needs at least 2 queries and 2 targets")
        if self.heatmap_dim < 1:
            raise ContractViolation("heatmap_dim must be positive")


@dataclass(frozen=True)
class GradcheckOptions:
    embed_dim: int = 16
    batch_size: int = 8
    hard_negatives: int = 2
    pairs: int = 64  # tuples drawn for the probe world
    step_size: float = 1e-4
    tolerance: float = 1e-4
    coordinate_fraction: float = 0.05
    seeds: int = 1  # consecutive seeds checked in one invocation

    def __post_init__(self):
        if self.embed_dim < 2 or self.batch_size < 2:
            raise ContractViolation("gradcheck needs embed_dim >= 2 and batch_size >= 2")
        if self.pairs < self.batch_size:
            raise ContractViolation("gradcheck needs at least one full batch of pairs")
        if self.step_size <= 0 or self.tolerance <= 0:
            raise ContractViolation("step_size and tolerance must be positive")
        if not 0.0 < self.coordinate_fraction <= 1.0:
            raise ContractViolation("coordinate_fraction must lie in (0, 1]")
        if self.seeds < 1:
            raise ContractViolation("seeds must be positive")


@dataclass(frozen=True)
class SweepOptions:
    grid: Mapping[str, tuple] = field(default_factory=dict)
    validation_tuples: int = 1000  # eval tuples used as the validation split

    def __post_init__(self):
        unknown = set(self.grid) - set(SWEEPABLE)
        if unknown:
            raise ContractViolation(
                f"sweep grid keys must come from {SWEEPABLE}, got {sorted(unknown)}"
            )
        cleaned = {}
        for key in sorted(self.grid):
            values = tuple(self.grid[key])
            if not values:
                raise ContractViolation(f"sweep grid for '{key}' is empty")
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
                raise ContractViolation(f"sweep grid for '{key}' must hold numbers")
            cleaned[key] = values
        object.__setattr__(self, "grid", cleaned)
        if self.validation_tuples < 1:
            raise ContractViolation("validation_tuples must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    diagnose: DiagnoseOptions = field(default_factory=DiagnoseOptions)
    gradcheck: GradcheckOptions = field(default_factory=GradcheckOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)

    def __post_init__(self):
        if self.seed < 0:
            raise ContractViolation("seed must be non-negative")


def benchmark_config(seed: int = 42) -> RunConfig:
    """Reference benchmark preset.

    Modality A renders with 4x the noise scale of the clean modalities
    and a noise/render condition number of 4, so temperature calibration
    and the distribution-alignment stages all have something real to
    correct. Queries skew toward A-heavy compositions while targets skew
    clean, mismatching the first and second moments of the two embedding
    sets; hard negatives sit at closeness 0.9, which keeps the noisy
    modality's near-duplicates genuinely confusable while the clean
    modalities can still separate theirs. Training runs the stock recipe
    defaults (2000 steps, batch 16, 2 hard negatives).
    """
    world = WorldConfig(
        noise_scales={"T": 0.375, "I": 0.375, "A": 1.5, "V": 0.375},
        anisotropy={"T": 1.0, "I": 1.0, "A": 4.0, "V": 1.0},
        hard_negative_closeness=0.9,
        composition_weights={"A": 2.0, "AV": 2.0, "T": 1.0, "I": 1.0, "V": 1.0},
        target_composition_weights={
            "T": 2.0,
            "I": 2.0,
            "TI": 1.0,
            "V": 1.0,
            "A": 1.0,
        },
    )
    return RunConfig(seed=seed, world=world, train=TrainConfig(seed=seed))


def effective_dict(config: RunConfig) -> dict:
    """The fully materialized config as plain JSON-ready data."""
    doc = dataclasses.asdict(config)
    # asdict leaves Mapping proxies and tuples; normalize for JSON.
    doc["world"] = config.world.as_dict()
    doc["sweep"]["grid"] = {k: list(v) for k, v in config.sweep.grid.items()}
    return doc


def config_hash(config: RunConfig) -> str:
    """Short stable digest of the effective config."""
    canonical = json.dumps(effective_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# --- strict construction from plain data -----------------------------------------


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or origin is types.UnionType:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        if len(inner) == 1:
            return _convert(inner[0], value, path)
        raise ConfigError(f"config key '{path}' has an unsupported union type")
    if dataclasses.is_dataclass(tp):
        return _dataclass_from(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{path}' expects a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{path}' expects an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{path}' expects a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key '{path}' expects a string, got {value!r}")
        return value
    if origin in (dict, collections.abc.Mapping) or tp in (dict, Mapping):
        if not isinstance(value, dict):
            raise ConfigError(f"config key '{path}' expects an object, got {value!r}")
        args = typing.get_args(tp)
        val_tp = args[1] if len(args) == 2 else None
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise ConfigError(f"config key '{path}' expects string keys")
            out[k] = _convert(val_tp, v, f"{path}.{k}") if val_tp is not None else v
        return out
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key '{path}' expects an array, got {value!r}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        return tuple(value)
    raise ConfigError(f"config key '{path}' has unsupported schema type {_type_name(tp)}")


def _dataclass_from(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{path or 'root'}' must be an object, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(data):
        if key not in names:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{dotted}'")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        kwargs[f.name] = _convert(hints[f.name], data[f.name], sub)
    try:
        return cls(**kwargs)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc


def apply_override(data: dict, assignment: str) -> None:
    """Apply one 'dotted.path=value' override onto the raw config tree.

    The value parses as JSON when possible (so numbers, booleans, arrays,
    and objects work) and falls back to a bare string.
    """
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    key, _, raw = assignment.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {assignment!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node:
            node[part] = {}
        node = node[part]
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends through a non-object value")
    node[parts[-1]] = value


def load_run_config(
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """Assemble the effective config: defaults, then file, then flag overrides.

    A --seed flag pins both the global seed and the training seed before
    the --set overrides apply, so an explicit train.seed override still
    wins.
    """
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
    else:
        data = {}
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        data["seed"] = seed
        train_section = data.setdefault("train", {})
        if not isinstance(train_section, dict):
            raise ConfigError("config section 'train' must be an object")
        train_section["seed"] = seed
    for assignment in overrides:
        apply_override(data, assignment)
    return _dataclass_from(RunConfig, data, "")
