"""Run configuration: dataclasses, YAML loading and dotted overrides."""

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .agents import POLICY_KINDS


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass
class EnvSpec:
    source: str = "synthetic"  # synthetic | file
    path: typing.Optional[str] = None
    generator: str = "stochastic"  # stochastic | smoothed
    sampler: str = "pool"  # pool | sphere | cube
    u: int = 200
    selected_users: int = 20
    d: int = 10
    total_arms: int = 1000
    m: int = 4
    K: int = 20
    env_seed: int = 0
    noise_sd: float = 0.1
    clamp: bool = False
    sigma: float = math.sqrt(0.1)
    R: typing.Optional[float] = None  # None -> 3 * sigma
    adversary: str = "fixed_grid"  # fixed_grid | spiteful
    c1: float = 1.0


@dataclass
class ParamSpec:
    lam: float = 1.0
    delta: float = 0.1
    lambda_x: typing.Optional[float] = None  # None -> from the context generator
    L: typing.Optional[float] = None  # None -> from the context generator
    gamma: typing.Optional[float] = None  # None -> the environment's true gap
    beta: typing.Optional[float] = None  # None -> confidence-width formula
    doubling_horizon: bool = False
    threshold_scale: float = 1.0
    alpha: int = 2


@dataclass
class SweepSpec:
    axis: typing.Optional[str] = None  # K | u | sigma
    values: typing.List[float] = field(default_factory=list)


@dataclass
class RunConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    params: ParamSpec = field(default_factory=ParamSpec)
    policies: typing.List[str] = field(default_factory=lambda: ["UniCLUB", "CLUB", "LinUCB-Ind"])
    T: int = 10_000
    seeds: typing.List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    exploration_scale: float = 1.0
    snapshot_every: typing.Optional[int] = None  # None -> max(1, T // 100)
    output_dir: str = "out"
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def validate(self):
        if self.T < 1:
            raise ConfigError("T", "must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds", "must be non-empty")
        if not self.exploration_scale > 0:
            raise ConfigError("exploration_scale", "must be positive")
        if self.snapshot_every is not None and self.snapshot_every < 1:
            raise ConfigError("snapshot_every", "must be >= 1")
        if not self.policies:
            raise ConfigError("policies", "must name at least one policy")
        for k, name in enumerate(self.policies):
            if name not in POLICY_KINDS:
                raise ConfigError(f"policies[{k}]", f"unknown policy {name!r}")
        e = self.env
        choices = {
            "env.source": (e.source, ("synthetic", "file")),
            "env.generator": (e.generator, ("stochastic", "smoothed")),
            "env.sampler": (e.sampler, ("pool", "sphere", "cube")),
            "env.adversary": (e.adversary, ("fixed_grid", "spiteful")),
        }
        for key, (val, ok) in choices.items():
            if val not in ok:
                raise ConfigError(key, f"{val!r} not one of {ok}")
        if e.source == "file" and not e.path:
            raise ConfigError("env.path", "required when env.source is 'file'")
        if e.K < 1:
            raise ConfigError("env.K", "must be >= 1")
        if not e.sigma > 0 or (e.R is not None and not e.R > 0):
            raise ConfigError("env.sigma", "sigma and R must be positive")
        if self.params.threshold_scale <= 0:
            raise ConfigError("params.threshold_scale", "must be positive")
        if self.sweep.axis is not None and self.sweep.axis not in ("K", "u", "sigma"):
            raise ConfigError("sweep.axis", "must be K, u or sigma")
        return self

    @property
    def resolved_snapshot_every(self):
        return self.snapshot_every or max(1, self.T // 100)

    def to_dict(self):
        return dataclasses.asdict(self)


def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:  # Optional[X]
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, key)
    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{key}[{k}]") for k, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, prefix=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            raise ConfigError(path, "unknown key")
        kwargs[key] = _coerce(value, hints[key], path)
    return cls(**kwargs)


def config_from_dict(data):
    return _build(RunConfig, data).validate()


def apply_overrides(data, overrides):
    """Apply ``key.path=value`` strings to a raw config mapping (in place)."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(key, f"cannot parse value: {exc}") from None
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(key, f"{part} is not a section")
            node = nxt
        node[parts[-1]] = value
    return data


def load_config(path, overrides=()):
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {p}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("", f"{p} must contain a mapping at the top level")
    apply_overrides(data, overrides)
    return config_from_dict(data)


def paper_scale_preset():
    """50 selected users of 200, 10 clusters, K=100, d=50, 5 seeds."""
    return {
        "env": {"u": 200, "selected_users": 50, "m": 10, "K": 100, "d": 50, "total_arms": 5000},
        "seeds": [0, 1, 2, 3, 4],
    }
