"""Run configuration with ``paper`` and ``desk`` profiles, stored as INI text.

Sections map onto sub-configs::

    [train]     TrainConfig scalars (profile, tasks, total_env_steps, ...)
    [model]     WorldModelConfig
    [planner]   PlannerConfig
    [replay]    capacity, demo_fraction

Keys left out of a file take the defaults of the selected profile.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .planner import PlannerConfig
from .tasks import TRAIN_TASKS
from .worldmodel import WorldModelConfig

PROFILES = ("paper", "desk")


@dataclass
class ReplayConfig:
    capacity: int = 500_000
    demo_fraction: float = 0.5


@dataclass
class TrainConfig:
    profile: str = "desk"
    tasks: tuple = TRAIN_TASKS
    total_env_steps: int = 100_000
    utd: float = 0.075
    batch: int = 256
    pretrain_iters: int = 5_000
    anneal_start: int = 2_000
    anneal_end: int = 12_000
    eval_every: int = 0               # env steps between evaluations; 0 only evaluates at the end
    eval_episodes: int = 10
    demos_per_task: int = 20
    min_quality: float = 0.75
    log_every: int = 100              # updates between loss records
    seed: int = 0
    model: WorldModelConfig = field(default_factory=WorldModelConfig.desk)
    planner: PlannerConfig = field(default_factory=PlannerConfig.desk)
    replay: ReplayConfig = field(default_factory=ReplayConfig)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ValueError("at least one task is required")
        if not self.utd > 0:
            raise ValueError("utd must be positive")
        if self.batch < 1 or self.total_env_steps < 0 or self.pretrain_iters < 0:
            raise ValueError("batch must be >= 1 and step counts non-negative")
        if not self.anneal_start < self.anneal_end:
            raise ValueError("anneal_start must be < anneal_end")
        if self.demos_per_task < 0:
            raise ValueError("demos_per_task must be >= 0")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(profile="paper", total_env_steps=100_000_000, batch=1024,
                    pretrain_iters=200_000, anneal_start=2_000_000, anneal_end=12_000_000,
                    eval_every=1_000_000, model=WorldModelConfig.paper(),
                    planner=PlannerConfig.paper(), replay=ReplayConfig(capacity=10_000_000))
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_profile(cls, profile: str, **kw) -> "TrainConfig":
        if profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        return cls.paper(**kw) if profile == "paper" else cls.desk(**kw)

    # -- text form -------------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["train"] = {f.name: _fmt(getattr(self, f.name)) for f in fields(self)
                       if f.name not in _SUB}
        for sec, attr in _SUB.items():
            obj = getattr(self, attr)
            cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "TrainConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        unknown = set(cp.sections()) - {"train", *_SUB}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        train = dict(cp["train"]) if cp.has_section("train") else {}
        base = cls.for_profile(train.get("profile", "desk").strip())
        kw = _parse_into(base, train, exclude=set(_SUB))
        for sec, attr in _SUB.items():
            sub = getattr(base, attr)
            if cp.has_section(sec):
                sub = replace(sub, **_parse_into(sub, dict(cp[sec])))
            kw[attr] = sub
        return replace(base, **kw)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in _SUB}
        out["tasks"] = list(self.tasks)
        for attr in _SUB.values():
            obj = getattr(self, attr)
            out[attr] = {f.name: getattr(obj, f.name) for f in fields(obj)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {k: v for k, v in d.items() if k not in _SUB.values()}
        kw["model"] = WorldModelConfig.from_dict(d["model"])
        kw["planner"] = PlannerConfig(**d["planner"])
        kw["replay"] = ReplayConfig(**d["replay"])
        return cls(**kw)


_SUB = {"model": "model", "planner": "planner", "replay": "replay"}


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_into(obj, raw: dict, exclude=()) -> dict:
    types = {f.name: type(getattr(obj, f.name)) for f in fields(obj)}
    out = {}
    for key, text in raw.items():
        if key in exclude:
            continue
        if key not in types:
            raise ValueError(f"unknown config key {key!r} for {type(obj).__name__}")
        out[key] = _parse(types[key], text.strip(), key)
    return out


def _parse(kind, text: str, key: str):
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is tuple:
            return tuple(t.strip() for t in text.split(",") if t.strip())
        if kind is int:
            return int(text.replace("_", ""))
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {text!r} as {kind.__name__}") from None


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        return TrainConfig.from_ini(f.read())
