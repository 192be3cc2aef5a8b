"""Training configuration: a YAML key-value tree with dotted-path overrides.

Every section maps onto one dataclass; unknown keys are errors. See
the README for the full schema.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import yaml

from .autodiff import UsageError
from .discriminator import DiscConfig, RewardConfig
from .policy import GaeConfig, PpoConfig


class ConfigError(UsageError):
    pass


@dataclass
class EnvConfig:
    name: str = "gridworld"
    params: dict = field(default_factory=dict)


@dataclass
class DemoConfig:
    path: str = "demos.bin"
    n_episodes: int = 100
    epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ConfigError("demos.n_episodes must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("demos.epsilon must lie in [0, 1]")


@dataclass
class NetConfig:
    actor_hidden: int = 256
    actor_layers: int = 4
    critic_hidden: int = 256
    critic_layers: int = 4
    critic_state_action: bool = False

    def __post_init__(self):
        if min(self.actor_hidden, self.actor_layers, self.critic_hidden, self.critic_layers) < 1:
            raise ConfigError("network sizes must be >= 1")


@dataclass
class LoopConfig:
    iterations: int = 200
    episodes_per_iter: int = 10
    disc_updates_per_iter: int = 0  # 0 means |tau|, the number of episodes just collected
    ppo_rounds_per_iter: int = 0  # 0 means |tau|
    batch_size: int = 64
    policy_capacity: int = 50_000
    seed: int = 0
    checkpoint_every: int = 10
    record_wall_ms: bool = False
    eval_episodes: int = 100

    def __post_init__(self):
        for name in ("iterations", "episodes_per_iter", "batch_size", "policy_capacity",
                     "checkpoint_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.disc_updates_per_iter < 0 or self.ppo_rounds_per_iter < 0:
            raise ConfigError("inner-loop counts must be >= 0 (0 = number of episodes)")


@dataclass
class OutputConfig:
    dir: str = "run"
    metrics: str = "metrics.csv"
    checkpoint: str = "checkpoint.ckpt"


@dataclass
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    demos: DemoConfig = field(default_factory=DemoConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: LoopConfig = field(default_factory=LoopConfig)
    gae: GaeConfig = field(default_factory=GaeConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(TrainConfig)}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, val in values.items():
        default = getattr(cls(), key) if key != "params" else {}
        if isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{where}.{key} must be true/false")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{where}.{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where}.{key} must be a number")
            val = float(val)
        elif isinstance(default, str) and not isinstance(val, str):
            raise ConfigError(f"{where}.{key} must be a string")
        elif isinstance(default, dict) and not isinstance(val, dict):
            raise ConfigError(f"{where}.{key} must be a mapping")
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except UsageError as exc:
        raise ConfigError(str(exc)) from exc


def from_dict(tree: dict | None) -> TrainConfig:
    tree = tree or {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(tree) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, factory in SECTIONS.items():
        values = tree.get(name)
        sections[name] = _build(type(factory()), {} if values is None else values, name)
    return TrainConfig(**sections)


def apply_override(tree: dict, spec: str) -> dict:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key=value")
    path, raw = spec.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override path {path!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}") from exc
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {spec!r} descends into a non-mapping")
    node[keys[-1]] = value
    return tree


def load_tree(path) -> dict:
    try:
        with open(path) as fh:
            tree = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"malformed config {path}: root must be a mapping")
    return tree


def load_config(path=None, overrides=()) -> TrainConfig:
    tree = load_tree(path) if path else {}
    for spec in overrides:
        apply_override(tree, spec)
    return from_dict(tree)
