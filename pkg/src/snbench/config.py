"""Experiment configuration: strict JSON schema with field-path errors.

A run is a pure function of its config; unknown keys are rejected so
stale fields cannot silently change behavior.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from snbench.errors import ParseError, SchemaError
from snbench.optim import TrainProtocol
from snbench.sampling import SamplerKind
from snbench.space import SearchSpaceDef
from snbench.supernet import MappingConfig

MIN_ARCHS_FOR_SKDT = 150


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 7
    n_train: int = 640
    n_test: int = 512
    noise: float = 1.0

    def to_json(self) -> dict:
        return {"seed": self.seed, "n_train": self.n_train, "n_test": self.n_test, "noise": self.noise}


@dataclass(frozen=True)
class MetricSettings:
    n_archs: int = 200
    threshold: float = 0.001
    top_k: int = 3
    n_supernet_seeds: int = 3

    def __post_init__(self):
        if self.n_archs < MIN_ARCHS_FOR_SKDT:
            raise SchemaError(
                f"metrics.n_archs: rank correlation is unstable below "
                f"{MIN_ARCHS_FOR_SKDT} architectures, got {self.n_archs}"
            )
        if self.threshold <= 0:
            raise SchemaError("metrics.threshold must be positive")
        if self.top_k < 1 or self.n_supernet_seeds < 1:
            raise SchemaError("metrics.top_k and n_supernet_seeds must be >= 1")

    def to_json(self) -> dict:
        return {
            "n_archs": self.n_archs,
            "threshold": self.threshold,
            "top_k": self.top_k,
            "n_supernet_seeds": self.n_supernet_seeds,
        }


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "surrogate"  # surrogate | table
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("surrogate", "table"):
            raise SchemaError(f"oracle.kind must be surrogate or table, got {self.kind!r}")
        if self.kind == "table" and not self.path:
            raise SchemaError("oracle.path: required when oracle.kind is table")

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.path is not None:
            out["path"] = self.path
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    space: SearchSpaceDef
    mapping: MappingConfig
    protocol: TrainProtocol
    sampler: SamplerKind
    dataset: DatasetConfig
    metrics: MetricSettings
    oracle: OracleConfig
    output_dir: str
    base_seed: int = 1
    factor: str = "baseline"
    setting: str = "default"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "space": self.space.to_json(),
            "mapping": self.mapping.to_json(),
            "protocol": self.protocol.to_json(),
            "sampler": self.sampler.value,
            "dataset": self.dataset.to_json(),
            "metrics": self.metrics.to_json(),
            "oracle": self.oracle.to_json(),
            "output_dir": self.output_dir,
            "base_seed": self.base_seed,
            "factor": self.factor,
            "setting": self.setting,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """Hash of the experiment identity (output location excluded)."""
        obj = self.to_json()
        del obj["output_dir"]
        payload = json.dumps(obj, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_SCHEMA: dict[str, dict] = {
    "": {
        "name": str, "space": dict, "mapping": dict, "protocol": dict,
        "sampler": str, "dataset": dict, "metrics": dict, "oracle": dict,
        "output_dir": str, "base_seed": int, "factor": str, "setting": str,
    },
    "space": {
        "family": str, "n_intermediate": int, "op_vocab": list, "max_edges": int,
        "channel_policy": str, "merge": str, "io_edge": bool, "output_in_degree": int,
    },
    "mapping": {
        "op_placement": str, "dynamic_channel_strategy": str, "wsbn": bool,
        "ofa_kernel": bool, "path_dropout_p": float, "global_dropout_p": float,
        "layers": int, "init_channels": int, "bn_track": bool, "bn_affine": bool,
    },
    "protocol": {
        "lr0": float, "epochs": int, "weight_decay": float, "batch_size": int,
        "train_portion": float, "seed": int,
    },
    "dataset": {"seed": int, "n_train": int, "n_test": int, "noise": float},
    "metrics": {"n_archs": int, "threshold": float, "top_k": int, "n_supernet_seeds": int},
    "oracle": {"kind": str, "path": str},
}

_REQUIRED = {
    "": ["name", "space", "mapping", "protocol", "sampler", "dataset", "metrics",
         "oracle", "output_dir"],
    "space": ["family", "n_intermediate", "op_vocab"],
    "mapping": ["op_placement", "dynamic_channel_strategy"],
    "protocol": ["lr0", "epochs"],
    "dataset": [],
    "metrics": [],
    "oracle": ["kind"],
}


def _check_section(obj: dict, section: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"{section or 'config'}: expected an object")
    schema = _SCHEMA[section]
    prefix = f"{section}." if section else ""
    for key in obj:
        if key not in schema:
            raise SchemaError(f"unknown field: {prefix}{key}")
    for key in _REQUIRED[section]:
        if key not in obj:
            raise SchemaError(f"missing field: {prefix}{key}")
    for key, value in obj.items():
        expected = schema[key]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if expected is int and isinstance(value, bool):
            raise SchemaError(f"bad type for {prefix}{key}: expected {expected.__name__}")
        if not isinstance(value, expected):
            raise SchemaError(f"bad type for {prefix}{key}: expected {expected.__name__}")


def parse_config(obj: dict) -> ExperimentConfig:
    _check_section(obj, "")
    for section in ("space", "mapping", "protocol", "dataset", "metrics", "oracle"):
        _check_section(obj[section], section)
    try:
        sampler = SamplerKind(obj["sampler"])
    except ValueError:
        raise SchemaError(f"bad value for sampler: {obj['sampler']!r}")
    try:
        space = SearchSpaceDef.from_json(obj["space"])
        mapping = MappingConfig.from_json(obj["mapping"])
        protocol = TrainProtocol.from_json(obj["protocol"])
    except (ValueError, KeyError) as exc:
        raise SchemaError(str(exc))
    return ExperimentConfig(
        name=obj["name"],
        space=space,
        mapping=mapping,
        protocol=protocol,
        sampler=sampler,
        dataset=DatasetConfig(**obj["dataset"]),
        metrics=MetricSettings(**obj["metrics"]),
        oracle=OracleConfig(**obj["oracle"]),
        output_dir=obj["output_dir"],
        base_seed=obj.get("base_seed", 1),
        factor=obj.get("factor", "baseline"),
        setting=obj.get("setting", "default"),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}")
    return parse_config(obj)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(config.dumps())


def set_field(config: ExperimentConfig, path: str, value) -> ExperimentConfig:
    """New config with one dotted field replaced (re-validated)."""
    obj = config.to_json()
    parts = path.split(".")
    node = obj
    for p in parts[:-1]:
        if p not in node:
            raise SchemaError(f"unknown factor path: {path}")
        node = node[p]
    if parts[-1] not in _SCHEMA.get(".".join(parts[:-1]), _SCHEMA[""]):
        raise SchemaError(f"unknown factor path: {path}")
    node[parts[-1]] = value
    return parse_config(obj)


@dataclass(frozen=True)
class FactorSweep:
    """One-factor-at-a-time validation plan."""

    baseline: ExperimentConfig
    factors: tuple[tuple[str, tuple], ...]

    def to_json(self) -> dict:
        return {
            "baseline": self.baseline.to_json(),
            "factors": [[path, list(values)] for path, values in self.factors],
        }


def parse_sweep(obj: dict) -> FactorSweep:
    if not isinstance(obj, dict):
        raise SchemaError("sweep: expected an object")
    for key in obj:
        if key not in ("baseline", "factors"):
            raise SchemaError(f"unknown field: {key}")
    for key in ("baseline", "factors"):
        if key not in obj:
            raise SchemaError(f"missing field: {key}")
    baseline = parse_config(obj["baseline"])
    factors = []
    for i, entry in enumerate(obj["factors"]):
        if not (isinstance(entry, list) and len(entry) == 2 and isinstance(entry[0], str)
                and isinstance(entry[1], list) and entry[1]):
            raise SchemaError(f"factors[{i}]: expected [path, [values...]]")
        factors.append((entry[0], tuple(entry[1])))
    return FactorSweep(baseline=baseline, factors=tuple(factors))


def load_sweep(path) -> FactorSweep:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"sweep file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}")
    return parse_sweep(obj)
