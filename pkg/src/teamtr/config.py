"""Run configuration: YAML schema, validation and named presets.

A config file is a mapping with these top-level sections (all optional
except ``env``)::

    env:        scenario name plus params, or scenario: custom with an inline table
    team:       init_scale, init_bias
    plan:       mode, order, resample_every, n_prompts, radius, radii, schedule, target
    advantage:  group_size, a_clip, eps_norm, baseline_mode
    ppo:        ppo_eps, lr, max_inner_steps, beta_init, beta_up, beta_down, band_low, beta_floor
    cert:       confidence_delta, zeta_mode
    run:        n_stages, exact_logging
    compare:    modes, seeds, chain
    scale:      n_values, modes, seeds, stages
    swap:       agent, at_stage, strategies, seeds, incoming_scale, probe_size, delta_align, align_lr, align_max_steps
    seed:       root seed
    output_dir: default output directory

Unknown keys anywhere raise ConfigError. Custom environments use::

    env:
      scenario: custom
      vocab_size: 2
      ctx_len_max: 2
      initial_dist: {"": 1.0}          # space-separated token strings
      reward: {mode: terminal-pattern, entries: {"0 1": 1.0}}
      # per-step-table entries use "context|message" keys, e.g. "0|1"
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .advantage import AdvantageConfig
from .env import EnvConfig, RewardSpec
from .errors import ConfigError
from .scenarios import build_scenario
from .trainer import PpoConfig, StagePlan, TrustRegionSchedule


@dataclass(frozen=True)
class TeamSection:
    init_scale: float = 0.0
    init_bias: tuple = ()


@dataclass(frozen=True)
class PlanSection:
    mode: str = "teamtr"
    order: str = "fixed"
    resample_every: int = 1
    n_prompts: int = 16
    radius: float = 0.02
    radii: tuple = ()
    schedule: str = "fixed"
    target: float = 0.02

    def to_plan(self, mode: str | None = None) -> StagePlan:
        sched = TrustRegionSchedule(self.schedule, self.radius, tuple(self.radii), self.target)
        return StagePlan(mode or self.mode, self.order, self.resample_every, self.n_prompts, sched)


@dataclass(frozen=True)
class CertSection:
    confidence_delta: float = 0.05
    zeta_mode: str = "proxy"


@dataclass(frozen=True)
class RunSection:
    n_stages: int = 5
    exact_logging: bool = True


@dataclass(frozen=True)
class CompareSection:
    modes: tuple = ("teamtr", "stale")
    seeds: tuple = (0,)
    chain: tuple = ()  # modes expected in descending order of final return


@dataclass(frozen=True)
class ScaleSection:
    n_values: tuple = (2, 3, 4, 5)
    modes: tuple = ("stale", "teamtr")
    seeds: tuple = (0, 1, 2)
    stages: int = 1


@dataclass(frozen=True)
class SwapSection:
    agent: int = 0
    at_stage: int = 2
    strategies: tuple = ("direct", "aligned", "retrain")
    seeds: tuple = (0,)
    incoming_scale: float = 2.0
    probe_size: int = 50
    delta_align: float = 0.01
    align_lr: float = 1.0
    align_max_steps: int = 5000


SECTIONS = {
    "team": TeamSection,
    "plan": PlanSection,
    "advantage": AdvantageConfig,
    "ppo": PpoConfig,
    "cert": CertSection,
    "run": RunSection,
    "compare": CompareSection,
    "scale": ScaleSection,
    "swap": SwapSection,
}
TOP_LEVEL = set(SECTIONS) | {"env", "seed", "output_dir"}


@dataclass(frozen=True)
class RunConfig:
    env: dict
    team: TeamSection = field(default_factory=TeamSection)
    plan: PlanSection = field(default_factory=PlanSection)
    advantage: AdvantageConfig = field(default_factory=AdvantageConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    cert: CertSection = field(default_factory=CertSection)
    run: RunSection = field(default_factory=RunSection)
    compare: CompareSection = field(default_factory=CompareSection)
    scale: ScaleSection = field(default_factory=ScaleSection)
    swap: SwapSection = field(default_factory=SwapSection)
    seed: int = 0
    output_dir: str = "runs/default"

    def env_config(self, n_agents: int | None = None) -> EnvConfig:
        return build_env(self.env, n_agents)

    def as_dict(self) -> dict:
        out = {"env": copy.deepcopy(self.env), "seed": self.seed, "output_dir": self.output_dir}
        for name in SECTIONS:
            out[name] = _plain(asdict(getattr(self, name)))
        return out

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _section(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(map(str, unknown))}")
    kwargs = {}
    for k, v in data.items():
        f = known[k]
        default = f.default if f.default is not MISSING else (
            f.default_factory() if f.default_factory is not MISSING else None)
        kwargs[k] = _coerce(v, default, f"{where}.{k}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _tokens(text) -> tuple:
    text = str(text).strip()
    try:
        return tuple(int(t) for t in text.split()) if text else ()
    except ValueError as exc:
        raise ConfigError(f"bad token string {text!r}") from exc


CUSTOM_KEYS = {"scenario", "vocab_size", "msg_len_max", "ctx_len_max", "n_agents", "gamma", "r_max",
               "initial_dist", "reward", "eos_id", "stop_tokens", "state_cap"}


def build_env(section: dict, n_agents: int | None = None) -> EnvConfig:
    if not isinstance(section, dict) or "scenario" not in section:
        raise ConfigError("env section needs a 'scenario' key")
    name = section["scenario"]
    if name != "custom":
        unknown = sorted(set(section) - {"scenario", "params"})
        if unknown:
            raise ConfigError(f"unknown keys in env: {', '.join(unknown)}")
        params = dict(section.get("params") or {})
        if n_agents is not None:
            params["n_agents"] = n_agents
        return build_scenario(name, params)
    unknown = sorted(set(section) - CUSTOM_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys in env: {', '.join(unknown)}")
    rew = dict(section.get("reward") or {})
    bad = sorted(set(rew) - {"mode", "entries", "stop_on_match"})
    if bad:
        raise ConfigError(f"unknown keys in env.reward: {', '.join(bad)}")
    mode = rew.get("mode", "terminal-pattern")
    entries = {}
    for key, r in (rew.get("entries") or {}).items():
        if mode == "per-step-table":
            if "|" not in str(key):
                raise ConfigError(f"per-step reward key {key!r} must look like 'context|message'")
            c, m = str(key).split("|", 1)
            entries[(_tokens(c), _tokens(m))] = float(r)
        else:
            entries[_tokens(key)] = float(r)
    init = {_tokens(k): float(v) for k, v in (section.get("initial_dist") or {"": 1.0}).items()}
    kw = {k: section[k] for k in ("vocab_size", "msg_len_max", "ctx_len_max", "n_agents", "gamma", "r_max",
                                   "eos_id", "state_cap") if k in section}
    if n_agents is not None:
        kw["n_agents"] = n_agents
    if "vocab_size" not in kw:
        raise ConfigError("custom env needs vocab_size")
    try:
        return EnvConfig(initial_dist=init, stop_tokens=tuple(section.get("stop_tokens") or ()),
                         reward_spec=RewardSpec(mode, entries, bool(rew.get("stop_on_match", False))), **kw)
    except TypeError as exc:
        raise ConfigError(f"env: {exc}") from exc


def parse_config(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(data) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(map(str, unknown))}")
    if "env" not in data:
        raise ConfigError("config needs an env section")
    kwargs = {name: _section(cls, data.get(name), name) for name, cls in SECTIONS.items()}
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError("seed must be a non-negative 64-bit integer")
    cfg = RunConfig(env=dict(data["env"]), seed=seed, output_dir=str(data.get("output_dir", "runs/default")), **kwargs)
    build_env(cfg.env)  # validate before any work starts
    from .experiments import parse_mode

    for m in cfg.compare.modes:
        parse_mode(m)
    if not set(cfg.compare.chain) <= set(cfg.compare.modes):
        raise ConfigError("compare.chain lists modes that compare.modes does not run")
    return cfg


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("teamtr").joinpath("presets").iterdir()
                  if p.name.endswith(".yaml"))


def load_config(source) -> RunConfig:
    """Load a YAML file path or a bundled preset name."""
    path = Path(source)
    if path.exists():
        text = path.read_text()
    elif str(source) in preset_names():
        text = resources.files("teamtr").joinpath("presets", f"{source}.yaml").read_text()
    else:
        raise ConfigError(f"no config file or preset named {source!r}")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    return parse_config(data)
