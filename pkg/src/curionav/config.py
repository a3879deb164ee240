"""Run configuration: every tunable in one place, stored as key = value text.

Sections mirror the components: ``[run]`` (just ``name``), ``[episode]``, ``[reward]``, ``[network]``,
``[icm]`` and ``[trainer]``.  Values are JSON literals (numbers, true/false,
lists); bare words are taken as strings.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .icm import IcmConfig
from .policy import NetworkConfig
from .rewards import RewardParams

PRESETS_DIR = Path(__file__).parent / "presets"
PRESET_NAMES = ("a3c_minus", "entropy", "icm", "icm_entropy")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSettings:
    train_max_steps: int = 7000
    eval_max_steps: int = 400
    goal_radius: float = 0.1
    robot_radius: float = 0.1


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    beta_entropy: float = 0.01
    use_icm: bool = True
    rollout_K: int = 50
    workers: int = 22
    learning_rate: float = 1e-4
    total_iterations: int = 3_000_000
    grad_clip_norm: float = 40.0
    seed: int = 0
    eval_interval: int = 10_000
    eval_episodes: int = 30
    eval_seed: int = 12345
    snapshot_every_eval: bool = True
    log_wall_time: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.rollout_K < 1:
            raise ConfigError("rollout_K must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.total_iterations < 0 or self.eval_interval < 1:
            raise ConfigError("total_iterations must be >= 0 and eval_interval >= 1")


@dataclass(frozen=True)
class RunConfig:
    name: str = "custom"
    episode: EpisodeSettings = field(default_factory=EpisodeSettings)
    reward: RewardParams = field(default_factory=RewardParams)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    icm: IcmConfig = field(default_factory=IcmConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def replace(self, **sections) -> "RunConfig":
        """``cfg.replace(trainer={"seed": 3}, name="x")`` with per-section overrides."""
        changes = {}
        for key, value in sections.items():
            if isinstance(value, dict):
                changes[key] = dataclasses.replace(getattr(self, key), **value)
            else:
                changes[key] = value
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = ("episode", "reward", "network", "icm", "trainer")


def _coerce(default, raw: str, where: str):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {raw!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {raw!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {raw!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = base or RunConfig()
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key != "name":
                    raise ConfigError(f"[run] unknown key {key!r}")
                cfg = dataclasses.replace(cfg, name=raw.strip())
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        current = getattr(cfg, section)
        defaults = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
        changes = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            changes[key] = _coerce(defaults[key], raw, f"[{section}] {key}")
        try:
            cfg = cfg.replace(**{section: changes})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists() and (PRESETS_DIR / f"{p.stem}.cfg").exists() and p.parent == Path("."):
        p = PRESETS_DIR / f"{p.stem}.cfg"
    return parse_config(p.read_text())


def load_preset(name: str) -> RunConfig:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return parse_config((PRESETS_DIR / f"{name}.cfg").read_text())


def format_config(cfg: RunConfig) -> str:
    lines = ["[run]", f"name = {cfg.name}", ""]
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            lines.append(f"{f.name} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)
