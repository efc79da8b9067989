"""Experiment configuration files (TOML) and provenance records."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .errors import InvalidConfig
from .mnar import MnarConfig
from .search import SearchConfig
from .training import TrainConfig

IMPUTERS = ("locf", "seed", "evolved", "oracle")


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str = "ldl"
    seeds: tuple = tuple(range(10))
    model: str = "dag"
    rate: float = 0.30
    n_patients: int | None = None
    n_steps: int | None = None
    imputers: tuple = ("locf", "seed", "evolved")
    proposer: str = "mutation"
    endpoint: str | None = None
    model_name: str | None = None
    bootstrap_replicates: int = 500
    train: TrainConfig = field(default_factory=TrainConfig)
    mnar: MnarConfig = field(default_factory=MnarConfig)
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self):
        if self.model not in ("dag", "no-dag"):
            raise InvalidConfig(f"model must be 'dag' or 'no-dag', got {self.model!r}")
        if self.proposer not in ("mutation", "llm"):
            raise InvalidConfig(f"proposer must be 'mutation' or 'llm', got {self.proposer!r}")
        bad = [i for i in self.imputers if i not in IMPUTERS]
        if bad:
            raise InvalidConfig(f"unknown imputer(s) {bad}; expected a subset of {IMPUTERS}")
        if not self.seeds:
            raise InvalidConfig("seeds must not be empty")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        out["imputers"] = list(self.imputers)
        return out

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=int(seed), variant=self.model)


def _section(cls, data: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise InvalidConfig(f"[{name}] unknown key(s): {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfig(f"[{name}] {exc}") from exc


def from_mapping(data: dict) -> ExperimentConfig:
    data = dict(data)
    sections = {
        "train": (TrainConfig, data.pop("train", {})),
        "mnar": (MnarConfig, data.pop("mnar", {})),
        "search": (SearchConfig, data.pop("search", {})),
    }
    built = {name: _section(cls, body, name) for name, (cls, body) in sections.items()}
    for key in ("seeds", "imputers"):
        if key in data:
            data[key] = tuple(data[key])
    allowed = {f.name for f in fields(ExperimentConfig)} - set(sections)
    unknown = set(data) - allowed
    if unknown:
        raise InvalidConfig(f"unknown top-level key(s): {sorted(unknown)}")
    return ExperimentConfig(**data, **built)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from exc
    return from_mapping(data)


def write_provenance(out_dir: str | Path, command: str, config: dict, inputs: dict[str, str]) -> Path:
    record = {
        "tool": "causalflow",
        "version": __version__,
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "inputs": dict(sorted(inputs.items())),
    }
    path = Path(out_dir) / "provenance.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path
