"""Flat ``key = value`` run configuration.

Every key is listed in :class:`RunConfig`; unknown keys are rejected. Lines
starting with ``#`` and blank lines are ignored. Set-valued keys take a
comma-separated list.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path as FsPath
from typing import Mapping

from ..agent import AgentDims
from ..errors import ValidationError
from ..federation import FederationConfig
from ..params import AGENT_SEGMENTS


class ConfigError(ValidationError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # federation
    eta: float = 1.0
    lr: float = 1.0
    pre_lr: float = 0.2
    tau: int = 3
    tau1: int = 1
    r: float = 0.2
    r1_unseen: float = 0.5
    r2_seen: float = 0.18
    rounds: int = 200
    pre_rounds: int = 30
    shared_segments: frozenset = frozenset({"lang_encoder"})
    eval_every: int = 5
    seed: int = 0
    # speaker
    speaker_tau: int = 5
    speaker_lr: float = 1.0
    speaker_rounds: int = 60
    # dataset
    seen_envs: int = 12
    unseen_envs: int = 4
    width: int = 6
    height: int = 6
    obstacle_density: float = 0.2
    episodes_per_env: int = 40
    val_seen_per_env: int = 10
    val_unseen_per_env: int = 40
    min_moves: int = 2
    max_moves: int = 4
    aug_count: int = 40
    pre_aug_count: int = 40
    # model
    embed: int = 8
    hidden: int = 16
    init_scale: float = 0.1
    # metrics
    d_success: float = 1.0
    d_th: float = 1.0
    # output
    out: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "shared_segments", frozenset(self.shared_segments))
        try:
            self.federation()
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
        unknown = self.shared_segments - set(AGENT_SEGMENTS)
        if unknown:
            raise ConfigError(f"unknown shared segment(s): {sorted(unknown)}")
        if self.pre_lr < 0 or self.speaker_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.speaker_tau < 1 or self.speaker_rounds < 0:
            raise ConfigError("speaker_tau must be >= 1 and speaker_rounds >= 0")
        if self.seen_envs < 1 or self.unseen_envs < 1:
            raise ConfigError("need at least one seen and one unseen environment")
        if min(self.episodes_per_env, self.val_seen_per_env, self.val_unseen_per_env) < 1:
            raise ConfigError("episode counts must be >= 1")
        if min(self.aug_count, self.pre_aug_count) < 0:
            raise ConfigError("augmentation counts must be >= 0")
        if self.width < 4 or self.height < 4:
            raise ConfigError("grid must be at least 4x4")
        if not 0.0 <= self.obstacle_density <= 0.4:
            raise ConfigError("obstacle_density must lie in [0, 0.4]")
        if not 1 <= self.min_moves <= self.max_moves:
            raise ConfigError("need 1 <= min_moves <= max_moves")
        if self.embed < 1 or self.hidden < 1 or self.init_scale < 0:
            raise ConfigError("model dimensions must be positive")
        if self.d_success < 0 or self.d_th <= 0:
            raise ConfigError("d_success must be >= 0 and d_th > 0")

    def federation(self, **overrides) -> FederationConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(FederationConfig)}
        kw.update(overrides)
        return FederationConfig(**kw)

    def speaker_federation(self) -> FederationConfig:
        return self.federation(tau=self.speaker_tau, lr=self.speaker_lr, rounds=self.speaker_rounds, eval_every=1)

    def dims(self) -> AgentDims:
        return AgentDims(embed=self.embed, hidden=self.hidden)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, frozenset):
                v = ",".join(sorted(v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is frozenset or kind == "frozenset":
            return frozenset(x.strip() for x in raw.split(",") if x.strip())
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def from_mapping(values: Mapping[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    changes = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = raw if not isinstance(raw, str) else _convert(key, raw, types[key])
    try:
        return dataclasses.replace(base, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path: str | FsPath | None = None, **overrides) -> RunConfig:
    values = parse_config_text(FsPath(path).read_text()) if path else {}
    cfg = from_mapping(values)
    if overrides:
        cfg = from_mapping({k: v for k, v in overrides.items() if v is not None}, cfg)
    return cfg
