"""Flat ``key = value`` experiment configuration with dotted section prefixes.

Example::

    seed = 7
    topology.kind = async_trajectory
    topology.actor_count = 2
    train.algo = ppo
    delay.actor-0.step = const:99

Lines starting with ``#`` are comments. Every key has a default; unknown keys
raise :class:`ConfigInvalid`. Environment variables ``DDRL_<SECTION>__<KEY>``
override file values (``DDRL_TRAIN__LR=0.2`` sets ``train.lr``).
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..coord.topologies import KINDS, TopologyConfig
from ..env import ENV_IDS, make_env
from ..errors import ConfigInvalid
from ..league import STRATEGIES
from .sim import parse_distribution

ENV_PREFIX = "DDRL_"


@dataclass(frozen=True)
class ActorConfig:
    rollout_length: int = 20
    envs_per_actor: int = 4
    queue_capacity: int = 64


@dataclass(frozen=True)
class EnvConfig:
    id: str = "chain_mdp"
    max_episode_steps: int = 0  # 0 = environment default


@dataclass(frozen=True)
class PolicyConfig:
    arch: str = "linear"
    hidden: int = 16


@dataclass(frozen=True)
class TrainConfig:
    algo: str = "a2c"
    gamma: float = 0.9
    lr: float = 0.5
    clip_eps: float = 0.2
    dual_clip_c: float = 3.0
    rho_bar: float = 1.0
    c_bar: float = 1.0
    value_coef: float = 0.5
    entropy_coef: float = 0.001
    q_alpha: float = 0.1
    epsilon: float = 0.2
    replay_capacity: int = 16384
    replay_batch: int = 32


@dataclass(frozen=True)
class LeagueConfig:
    enabled: bool = False
    strategy: str = "pfsp"
    pfsp_exponent: float = 2.0
    snapshot_every: int = 5000
    eval_games: int = 0
    cooperation: str = "independent"
    shared_policy: bool = True
    agent_id_feature: bool = True


@dataclass(frozen=True)
class RunConfig:
    frames: int = 50000
    out_dir: str = ""
    metrics_every: float = 1000.0  # simulated ticks
    metrics_every_wall: float = 1.0  # seconds, used when clock = wall
    eval_episodes: int = 200


@dataclass(frozen=True)
class SimConfig:
    step_ticks: float = 1.0
    update_ticks: float = 1.0
    grad_ticks: float = 0.0
    infer_ticks: float = 0.0
    barrier_timeout: float = 1e6


@dataclass(frozen=True)
class FaultConfig:
    kill_worker: str = ""
    kill_after_segments: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    transport: str = "in_process"
    clock: str = "simulated"
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    actor: ActorConfig = field(default_factory=ActorConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    league: LeagueConfig = field(default_factory=LeagueConfig)
    run: RunConfig = field(default_factory=RunConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    fault: FaultConfig = field(default_factory=FaultConfig)
    # (worker_id, operation) -> distribution spec string
    delays: tuple[tuple[str, str, str], ...] = ()

    def replace(self, **flat: Any) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``cfg.replace(**{"train.lr": 0.1})``."""
        return from_mapping({**to_mapping(self), **{k: str(v) for k, v in flat.items()}})

    def worker_ids(self) -> list[str]:
        ids = [f"actor-{i}" for i in range(self.topology.actor_count)]
        ids += [f"learner-{i}" for i in range(self.topology.learner_count)]
        if self.topology.kind == "central_inference":
            ids.append("batcher")
        return ids


_SECTION_TYPES = {"topology": TopologyConfig, "actor": ActorConfig, "env": EnvConfig, "policy": PolicyConfig,
                  "train": TrainConfig, "league": LeagueConfig, "run": RunConfig, "sim": SimConfig,
                  "fault": FaultConfig}


def _coerce(key: str, raw: str, default: Any):
    raw = raw.strip()
    try:
        if key == "topology.max_staleness":
            return None if raw.lower() in ("", "none", "inf", "unlimited") else int(raw)
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigInvalid(f"{key}: cannot parse {raw!r}") from None


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip() if not line.lstrip().startswith("#") else ""
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigInvalid(f"line {lineno}: duplicate key {key}")
        out[key] = value.strip()
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            out[name[len(ENV_PREFIX):].lower().replace("__", ".")] = value
    return out


def from_mapping(flat: Mapping[str, str]) -> ExperimentConfig:
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {s: {} for s in _SECTION_TYPES}
    delays = []
    for key, raw in flat.items():
        parts = key.split(".")
        if parts[0] == "delay":
            if len(parts) != 3:
                raise ConfigInvalid(f"{key}: delay keys look like delay.<worker>.<operation>")
            try:
                parse_distribution(raw)
            except ValueError as exc:
                raise ConfigInvalid(f"{key}: {exc}") from None
            delays.append((parts[1], parts[2], raw.strip()))
        elif len(parts) == 1 and parts[0] in ("seed", "transport", "clock"):
            top[parts[0]] = _coerce(key, raw, {"seed": 0, "transport": "", "clock": ""}[parts[0]])
        elif len(parts) == 2 and parts[0] in _SECTION_TYPES:
            cls = _SECTION_TYPES[parts[0]]
            fields = {f.name: f for f in dataclasses.fields(cls)}
            if parts[1] not in fields:
                raise ConfigInvalid(f"unknown config key {key!r}")
            default = cls().__getattribute__(parts[1])
            sections[parts[0]][parts[1]] = _coerce(key, raw, default)
        else:
            raise ConfigInvalid(f"unknown config key {key!r}")
    try:
        built = {name: _SECTION_TYPES[name](**vals) for name, vals in sections.items()}
        cfg = ExperimentConfig(**top, **built, delays=tuple(sorted(delays)))
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from None
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.transport not in ("in_process", "sockets"):
        raise ConfigInvalid("transport must be in_process or sockets")
    if cfg.clock not in ("simulated", "wall"):
        raise ConfigInvalid("clock must be simulated or wall")
    if cfg.env.id not in ENV_IDS:
        raise ConfigInvalid(f"env.id must be one of {ENV_IDS}")
    if cfg.topology.kind not in KINDS:
        raise ConfigInvalid(f"topology.kind must be one of {KINDS}")
    if cfg.train.algo not in ("a2c", "ppo"):
        raise ConfigInvalid("train.algo must be a2c or ppo")
    if cfg.train.algo == "ppo" and cfg.train.dual_clip_c <= 1:
        raise ConfigInvalid("train.dual_clip_c must exceed 1")
    if cfg.policy.arch not in ("tabular", "linear", "mlp1"):
        raise ConfigInvalid("policy.arch must be tabular, linear or mlp1")
    if cfg.league.strategy not in STRATEGIES:
        raise ConfigInvalid(f"league.strategy must be one of {STRATEGIES}")
    if cfg.league.cooperation not in ("independent", "joint"):
        raise ConfigInvalid("league.cooperation must be independent or joint")
    if cfg.actor.rollout_length < 1 or cfg.actor.envs_per_actor < 1 or cfg.actor.queue_capacity < 1:
        raise ConfigInvalid("actor sizes must be >= 1")
    if cfg.topology.kind in ("async_trajectory", "central_inference") and \
            cfg.topology.batch_size > cfg.actor.queue_capacity:
        raise ConfigInvalid("topology.batch_size cannot exceed actor.queue_capacity")
    if cfg.run.frames < 0:
        raise ConfigInvalid("run.frames must be >= 0")
    if cfg.topology.kind == "replay_qlearning":
        spec = make_env(cfg.env.id).spec
        if spec.players != 1 or spec.obs_dim == 0:
            raise ConfigInvalid("replay_qlearning needs a single-player env with one-hot states")
    if cfg.topology.kind == "central_inference" and cfg.transport == "sockets":
        raise ConfigInvalid("central_inference runs with the in_process transport only")
    workers = set(cfg.worker_ids())
    for worker, _, _ in cfg.delays:
        if worker not in workers:
            raise ConfigInvalid(f"delay table names unknown worker {worker!r}")


def to_mapping(cfg: ExperimentConfig) -> dict[str, str]:
    out = {"seed": str(cfg.seed), "transport": cfg.transport, "clock": cfg.clock}
    for name in _SECTION_TYPES:
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            v = getattr(section, f.name)
            out[f"{name}.{f.name}"] = "unlimited" if v is None else str(v)
    for worker, op, dist in cfg.delays:
        out[f"delay.{worker}.{op}"] = dist
    return out


def to_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_mapping(cfg).items())


def load_config(path: str | os.PathLike, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    return from_mapping({**parse_text(text), **env_overrides(environ)})


def load_config_matrix(path: str | os.PathLike, environ=None) -> dict[str, ExperimentConfig]:
    """Base keys apply to every row; ``rows.<name>.<key> = value`` sets per-row overrides."""
    flat = {**parse_text(Path(path).read_text()), **env_overrides(environ)}
    base = {k: v for k, v in flat.items() if not k.startswith("rows.")}
    rows: dict[str, dict[str, str]] = {}
    for k, v in flat.items():
        if k.startswith("rows."):
            parts = k.split(".", 2)
            if len(parts) != 3:
                raise ConfigInvalid(f"{k}: rows keys look like rows.<name>.<key>")
            rows.setdefault(parts[1], {})[parts[2]] = v
    if not rows:
        raise ConfigInvalid("config matrix defines no rows")
    return {name: from_mapping({**base, **over}) for name, over in rows.items()}
