"""Run configuration: nested dataclasses loaded from YAML."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .gvae import GvaeConfig, TrainConfig
from .search import SearchConfig
from .smoother import SmootherConfig


class ConfigError(ValueError):
    pass


@dataclass
class GrammarSection:
    name: str = "bench1"  # builtin name or path to a grammar file
    n_max: int | None = None


@dataclass
class DataSection:
    size: int = 2000
    seed: int = 0
    val_fraction: float = 0.1
    gvae_grammar: str | None = None  # re-parse generated strings under a second grammar


@dataclass
class BenchSection:
    suite: int | None = None
    problems: list[str] = field(default_factory=list)
    noise: float = 0.05
    runs: int = 5
    closure: str | None = None  # default: explicit for suite 1, implicit for 2, forced for 3
    order: int | None = None
    checkpoint: str | None = None


@dataclass
class RunConfig:
    grammar: GrammarSection = field(default_factory=GrammarSection)
    data: DataSection = field(default_factory=DataSection)
    model: GvaeConfig = field(default_factory=GvaeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    bench: BenchSection = field(default_factory=BenchSection)
    seed: int = 0
    threads: int = 1
    out: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        # the output location does not change what a run computes
        d = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def training_hash(self) -> str:
        """Hash of the sections a trained GVAE depends on; search and smoother settings are left out."""
        d = {k: v for k, v in self.to_dict().items() if k in ("grammar", "data", "model", "train", "seed", "threads")}
        blob = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if type(None) in args or tp is typing.Any:
            return None
        raise ConfigError(f"{where}: null not allowed")
    if origin in (typing.Union, types.UnionType):
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError("; ".join(errors))
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        inner = args[0] if args else typing.Any
        items = [_coerce(inner, v, where) for v in value]
        return tuple(items) if origin is tuple else items
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, raw: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}".lstrip(".")) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    cfg = _build(RunConfig, raw)
    # one seed drives every stage unless a section pins its own
    for section in ("train", "search", "smoother"):
        if "seed" not in raw.get(section, {}):
            setattr(getattr(cfg, section), "seed", cfg.seed)
    if "seed" not in raw.get("data", {}):
        cfg.data.seed = cfg.seed
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict(), default=list)), sort_keys=True)
