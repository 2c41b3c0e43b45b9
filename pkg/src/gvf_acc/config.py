"""Run configuration: one YAML file whose sections mirror the modules.

Every field has a default, so an empty file (or no file) is a valid
configuration. Unknown keys are rejected so typos cannot silently fall back
to defaults. ``--set section.key=value`` style overrides are applied on top
of the file before validation.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from . import controllers as ctl
from .cumulants import SafetyZoneParams
from .learner import LearnerConfig
from .scenarios import ScenarioSpec, ScriptProfile, TrackerParams, TrafficEnv, UnknownScenarioError, get_scenario
from .sim import SimConfig

OUTPUT_ENV_VAR = "GVF_ACC_OUT"
DEFAULT_OUTPUT_DIR = "runs"


class ConfigError(ValueError):
    """Invalid, unreadable or inconsistent configuration."""


Knots = Tuple[Tuple[float, float], ...]


def _knots(value) -> Optional[Knots]:
    if value is None:
        return None
    return tuple((float(x), float(m)) for x, m in value)


@dataclass(frozen=True)
class FuzzySection:
    """Fuzzy controller knobs. ``speed_set: null`` derives the set from each scenario's target speed."""

    greediness: float = 8.0
    n_actions: int = 21
    safety_set: Knots = ((0.6, 0.0), (0.9, 1.0))
    speed_set: Optional[Knots] = None
    comfort_set: Knots = ((-4.0, 0.1), (0.0, 1.0), (4.0, 0.1))

    def __post_init__(self):
        object.__setattr__(self, "safety_set", _knots(self.safety_set))
        object.__setattr__(self, "speed_set", _knots(self.speed_set))
        object.__setattr__(self, "comfort_set", _knots(self.comfort_set))
        if self.n_actions < 2:
            raise ValueError("n_actions must be >= 2")

    def build(self, v_target: float) -> ctl.FuzzyControllerConfig:
        return ctl.FuzzyControllerConfig(
            v_target=v_target,
            action_sweep=ctl.default_sweep(self.n_actions),
            greediness=self.greediness,
            safety_set=ctl.FuzzySet(self.safety_set),
            speed_set=ctl.FuzzySet(self.speed_set) if self.speed_set else None,
            comfort_set=ctl.FuzzySet(self.comfort_set),
        )


@dataclass(frozen=True)
class RuleWithSpeedSection:
    beta: float = 0.85
    alpha_decel: float = 0.4
    alpha_speed: float = 0.01
    e_min: float = -5.0
    e_max: float = 5.0

    def build(self, v_target: float) -> ctl.RuleWithSpeedConfig:
        return ctl.RuleWithSpeedConfig(v_target=v_target, **dataclasses.asdict(self))


@dataclass(frozen=True)
class RuleWithoutSpeedSection:
    beta1: float = 0.8
    beta2: float = 0.9
    alpha_decel: float = 0.5
    alpha_accel: float = 0.05
    tracker_gain: float = 0.5

    def build(self, v_target: float) -> ctl.RuleWithoutSpeedConfig:
        return ctl.RuleWithoutSpeedConfig(v_target=v_target, **dataclasses.asdict(self))


@dataclass(frozen=True)
class BaselineSection:
    k_gap: float = 0.05
    k_rel: float = 0.1
    k_speed: float = 0.3
    hold_speed: float = 0.5
    hold_margin: float = 2.0
    hold_brake: float = 0.3

    def build(self, v_target: float, zone: SafetyZoneParams) -> ctl.BaselineGapConfig:
        return ctl.BaselineGapConfig(v_target=v_target, params=zone, **dataclasses.asdict(self))


@dataclass(frozen=True)
class ControllersSection:
    fuzzy: FuzzySection = field(default_factory=FuzzySection)
    rule_with_speed: RuleWithSpeedSection = field(default_factory=RuleWithSpeedSection)
    rule_without_speed: RuleWithoutSpeedSection = field(default_factory=RuleWithoutSpeedSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)


@dataclass(frozen=True)
class TrainingSection:
    """Traffic used for learning and the default question discounts."""

    episode_seconds: float = 30.0
    oblivious_rear_fraction: float = 0.3
    close_start_fraction: float = 0.0
    gamma: float = 0.95
    sweep_gammas: Tuple[float, ...] = (0.95, 0.975, 0.983)

    def __post_init__(self):
        object.__setattr__(self, "sweep_gammas", tuple(float(g) for g in self.sweep_gammas))
        if not self.episode_seconds > 0:
            raise ValueError("episode_seconds must be > 0")
        for name in ("oblivious_rear_fraction", "close_start_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class EvaluationSection:
    warning_threshold: float = 0.5
    scenario_seed: Optional[int] = None
    mc_points: int = 1000
    mc_rollouts: int = 4


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs. ``scenarios`` maps preset names to field overrides."""

    seed: int = 0
    output_dir: str = ""
    sim: SimConfig = field(default_factory=SimConfig)
    zone: SafetyZoneParams = field(default_factory=SafetyZoneParams)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    controllers: ControllersSection = field(default_factory=ControllersSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    scenarios: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.output_dir:
            object.__setattr__(self, "output_dir", os.environ.get(OUTPUT_ENV_VAR, DEFAULT_OUTPUT_DIR))

    def scenario(self, name: str) -> ScenarioSpec:
        """Preset ``name`` with this config's overrides and zone applied."""
        overrides = dict(self.scenarios.get(name, {}))
        if isinstance(overrides.get("zone"), dict):
            overrides["zone"] = SafetyZoneParams(**overrides["zone"])
        elif "zone" not in overrides and get_scenario(name).zone == SafetyZoneParams():
            # Presets with their own zone (the small-robot one) keep it.
            overrides["zone"] = self.zone
        try:
            return get_scenario(name, _scenario_overrides(overrides))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scenarios.{name}: {exc}") from exc

    def traffic(self, question) -> TrafficEnv:
        """Randomized training traffic for ``question`` under this config."""
        try:
            return TrafficEnv(question, self.sim, self.zone, episode_seconds=self.training.episode_seconds,
                              oblivious_rear_fraction=self.training.oblivious_rear_fraction,
                              close_start_fraction=self.training.close_start_fraction)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def controller_config(self, controller: str, spec: ScenarioSpec):
        c = self.controllers
        if controller == "fuzzy":
            return c.fuzzy.build(spec.v_target)
        if controller == "rule_with_speed":
            return c.rule_with_speed.build(spec.v_target)
        if controller == "rule_without_speed":
            return c.rule_without_speed.build(spec.v_target)
        if controller == "baseline":
            return c.baseline.build(spec.v_target, spec.zone)
        raise ConfigError(f"unknown controller {controller!r}")


def _scenario_overrides(raw: dict) -> dict:
    out = dict(raw)
    for key in ("lead_script", "rear_script"):
        if key in out and not isinstance(out[key], ScriptProfile):
            out[key] = ScriptProfile(tuple(tuple(seg) for seg in out[key]))
    if isinstance(out.get("rear_tracker"), dict):
        out["rear_tracker"] = TrackerParams(**out["rear_tracker"])
    return out


def _build(cls, data: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclass fields."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}; "
                          f"valid keys: {', '.join(known)}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].default_factory if known[name].default_factory is not dataclasses.MISSING else None
        sub = f"{where}.{name}" if where else name
        if ftype is not None and dataclasses.is_dataclass(ftype):
            kwargs[name] = _build(ftype, value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _check_scenarios(raw: dict) -> None:
    allowed = {f.name for f in fields(ScenarioSpec)} - {"name"}
    for name, overrides in raw.items():
        try:
            get_scenario(name)
        except UnknownScenarioError as exc:
            raise ConfigError(f"scenarios: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError(f"scenarios.{name}: expected a mapping")
        bad = sorted(set(overrides) - allowed)
        if bad:
            raise ConfigError(f"scenarios.{name}: unknown key(s) {', '.join(bad)}")


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {dotted!r}: {k!r} is not a section")
        node = nxt
    node[keys[-1]] = value


def parse_override(text: str) -> Tuple[str, Any]:
    """``"learner.learning_rate=1e3"`` -> ``("learner.learning_rate", 1000.0)`` (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    # YAML 1.1 reads "1e3" as a string; numbers written that way are common on a command line.
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            pass
    return key.strip(), value


def from_dict(tree: Optional[dict], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    tree = dict(tree or {})
    for key, value in (overrides or {}).items():
        _set_path(tree, key, value)
    cfg = _build(RunConfig, tree, "")
    _check_scenarios(cfg.scenarios)
    return cfg


def load_config(path: Optional[os.PathLike | str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a YAML run config; ``path=None`` means all defaults."""
    tree = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: not valid YAML: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    return from_dict(tree, overrides)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def default_config_text() -> str:
    return dump_config(RunConfig(output_dir=DEFAULT_OUTPUT_DIR))

