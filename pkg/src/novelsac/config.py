"""Run configuration: one versioned JSON document covering every experiment knob."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .env import CORRIDORS, STEP_CAP, MazeEnv, WorldGeometry
from .novelty import NoveltyConfig
from .recovery import ConfigurationError, RecoveryConfig
from .sac import SacHyper

CONFIG_VERSION = 1

GEOMETRY_KEYS = ("corridor_centers", "corridor_width", "chamber_height", "blockade_height", "start", "goal", "goal_radius")


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass
class EnvSection:
    step_cap: int = STEP_CAP
    geometry: dict = field(default_factory=dict)


@dataclass
class TrainSection:
    n_policies: int = 3
    eval_episodes: int = 100


@dataclass
class EvalSection:
    episodes: int = 100
    # constrained entries: keep sampling until an admissible action is found
    fallback: bool = False


@dataclass
class RecoverSection:
    blockade: list = field(default_factory=lambda: ["middle"])
    episodes: int = 100


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvSection = field(default_factory=EnvSection)
    sac: SacHyper = field(default_factory=SacHyper)
    novelty: NoveltyConfig = field(default_factory=NoveltyConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    recover: RecoverSection = field(default_factory=RecoverSection)

    def to_dict(self) -> dict:
        d = {"version": CONFIG_VERSION, "seed": self.seed}
        for name in SECTIONS:
            d[name] = asdict(getattr(self, name))
        d["sac"] = self.sac.to_dict()
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def make_env(self, blockades=()) -> MazeEnv:
        env = MazeEnv(WorldGeometry(**self.env.geometry), step_cap=self.env.step_cap)
        for name in blockades:
            env.set_blockade(name, True)
        return env


SECTIONS = {
    "env": EnvSection,
    "sac": SacHyper,
    "novelty": NoveltyConfig,
    "train": TrainSection,
    "eval": EvalSection,
    "recovery": RecoveryConfig,
    "recover": RecoverSection,
}


def _build(name: str, cls, values) -> object:
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError, ConfigurationError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}; expected {CONFIG_VERSION}")
    unknown = sorted(set(doc) - {"version", "seed", *SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _build(name, cls, doc.get(name, {})) for name, cls in SECTIONS.items()}
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    cfg = RunConfig(seed=seed, **kwargs)
    _check(cfg)
    return cfg


def _check(cfg: RunConfig) -> None:
    bad_geo = sorted(set(cfg.env.geometry) - set(GEOMETRY_KEYS))
    if bad_geo:
        raise ConfigError(f"unknown key(s) in 'env.geometry': {', '.join(bad_geo)}")
    if cfg.env.step_cap < 1:
        raise ConfigError("env.step_cap must be >= 1")
    if cfg.train.n_policies < 1:
        raise ConfigError("train.n_policies must be >= 1")
    for name, val in (("train.eval_episodes", cfg.train.eval_episodes), ("eval.episodes", cfg.eval.episodes), ("recover.episodes", cfg.recover.episodes)):
        if val < 0:
            raise ConfigError(f"{name} must be >= 0")
    for name in cfg.recover.blockade:
        if name not in CORRIDORS:
            raise ConfigError(f"recover.blockade: unknown corridor {name!r}; expected one of {CORRIDORS}")


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(doc)
