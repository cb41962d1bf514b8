"""Single-document run configuration with dotted-key overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .agents import AgentConfig
from .cggn import CggnConfig
from .perception import LocalizerConfig, ObserverConfig
from .worldgen import WorldParams


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    env_dir: str = "envs"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    manifest_dir: str = "manifests"


@dataclass
class WorldgenConfig:
    n_envs: int = 90
    split_ratios: tuple = (61 / 90, 11 / 90, 18 / 90)
    world: WorldParams = field(default_factory=WorldParams)


@dataclass
class DataConfig:
    localizer_pairs: int = 4000
    cggn_train_samples: int = 20_000
    cggn_test_samples: int = 500
    # train / val_seen / val_unseen / test_unseen navigation pairs
    nav_counts: tuple = (40_000, 1000, 1000, 5000)


@dataclass
class EvalConfig:
    train_seeds: tuple = (0, 1, 2)
    test_episodes: int | None = None  # None: every test_unseen pair
    cggn_samples: int = 100
    workers: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    worldgen: WorldgenConfig = field(default_factory=WorldgenConfig)
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    cggn: CggnConfig = field(default_factory=CggnConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# Reduced sizes for a single CPU core; structure and protocol are unchanged.
PRESETS: dict[str, dict] = {
    "paper": {},
    "desk": {
        "cggn": {"hidden": 64, "node_mlp_hidden": 64, "batch_size": 20},
        "agent": {"hidden": 64, "episodes": 3000, "cggn_samples": 100},
        "data": {"nav_counts": [4000, 200, 200, 500]},
    },
    "smoke": {
        "worldgen": {"n_envs": 30},
        "localizer": {"epochs": 2},
        "cggn": {"hidden": 16, "node_mlp_hidden": 16, "gnn_layers": 2, "batch_size": 10, "iterations": 20},
        "agent": {"hidden": 16, "episodes": 40, "batch_episodes": 10, "cggn_samples": 10},
        "data": {"localizer_pairs": 400, "cggn_train_samples": 200, "cggn_test_samples": 20,
                 "nav_counts": [100, 10, 10, 20]},
        "eval": {"train_seeds": [0], "cggn_samples": 10},
    },
}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return build(tp, value, where)
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if origin is typing.Union or str(origin) == "types.UnionType":
        if value is None:
            return None
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        return _coerce(inner, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def build(cls, data: dict, where: str = ""):
    """Instantiate dataclass ``cls`` from a (partial) dict; unknown keys are rejected."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(f'{where}{k}' for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}{k}.") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> dict:
    """``agent.max_steps=50`` -> {"agent": {"max_steps": 50}}; values are JSON, else strings."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, preset: str = "paper", overrides=(), seed: int | None = None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    doc = dict(PRESETS[preset])
    if path is not None:
        try:
            with open(path) as f:
                doc = merge(doc, json.load(f))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for item in overrides:
        doc = merge(doc, parse_override(item))
    if seed is not None:
        doc["seed"] = seed
    cfg = build(RunConfig, doc)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    r = cfg.worldgen.split_ratios
    if len(r) != 3 or any(x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ConfigError(f"split_ratios must be three non-negative numbers summing to 1, got {list(r)}")
    if cfg.worldgen.n_envs < 3:
        raise ConfigError("need at least 3 environments")
    if len(cfg.data.nav_counts) != 4 or any(c < 0 for c in cfg.data.nav_counts):
        raise ConfigError("nav_counts needs four non-negative entries")
    if not cfg.eval.train_seeds:
        raise ConfigError("eval.train_seeds must not be empty")
    if cfg.eval.workers < 1:
        raise ConfigError("eval.workers must be >= 1")
    try:
        cfg.worldgen.world.check()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
