"""Scenario presets, scripted and reactive drivers, and the randomized
traffic used to train the predictors."""
from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .cumulants import (
    CAR_ZONE,
    ROBOT_ZONE,
    ContinuationParams,
    CumulantKind,
    SafetyZoneParams,
    continuation,
    cumulant,
)
from .learner import FEATURES_BY_KIND
from .sim import (
    ACTION_HIGH,
    ACTION_LOW,
    SimConfig,
    VehicleState,
    WorldState,
    extract_features,
    initial_state,
    rear_gap,
    step,
)

KMH = 1.0 / 3.6


class UnknownScenarioError(KeyError):
    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class ScriptProfile:
    """Piecewise-constant acceleration: ``segments`` are ``(start_time_s, accel)``."""

    segments: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        segs = tuple((float(t), float(a)) for t, a in self.segments)
        if any(b[0] < a[0] for a, b in zip(segs, segs[1:])):
            raise ValueError("script segments must be ordered by start time")
        object.__setattr__(self, "segments", segs)

    def accel_at(self, t: float) -> float:
        accel = 0.0
        for start, a in self.segments:
            if t + 1e-9 >= start:
                accel = a
            else:
                break
        return accel


@dataclass(frozen=True)
class TrackerParams:
    """Delayed proportional gap tracker (a sluggish human-like follower)."""

    delay: float = 0.6
    time_gap: float = 1.5
    standstill: float = 4.0
    k_gap: float = 0.25
    k_rel: float = 1.0
    k_speed: float = 0.5
    v_desired: float = 100 * KMH
    a_max: float = 2.5
    b_max: float = 6.0


class DelayedGapTracker:
    """Follows the ego from behind, reacting to the gap and ego speed seen ``delay`` seconds ago."""

    def __init__(self, params: TrackerParams, dt: float):
        self.params = params
        self._history: deque = deque(maxlen=max(1, int(round(params.delay / dt))) + 1)

    def accel(self, state: WorldState) -> float:
        p = self.params
        rear = state.rear
        self._history.append((rear_gap(state), state.ego.speed))
        gap_seen, ego_speed_seen = self._history[0]
        cruise = p.k_speed * (p.v_desired - rear.speed)
        spacing = gap_seen - (p.standstill + p.time_gap * rear.speed)
        follow = p.k_gap * spacing + p.k_rel * (ego_speed_seen - rear.speed)
        return min(max(min(cruise, follow), -p.b_max), p.a_max)


class RandomDriver:
    """Non-reactive driver that switches between holding, speeding up and braking at random times."""

    def __init__(self, rng: np.random.Generator, stationary: bool = False):
        self.rng = rng
        self.stationary = stationary
        self._accel = 0.0
        self._remaining = 0.0

    def accel(self, dt: float) -> float:
        if self.stationary:
            return 0.0
        if self._remaining <= 0.0:
            r = self.rng
            self._remaining = r.uniform(1.0, 6.0)
            u = r.random()
            if u < 0.4:
                self._accel = 0.0
            elif u < 0.6:
                self._accel = r.uniform(0.0, 2.0)
            elif u < 0.85:
                self._accel = r.uniform(-3.0, 0.0)
            else:
                self._accel = r.uniform(-6.0, -4.0)
        self._remaining -= dt
        return self._accel


@dataclass(frozen=True)
class ScenarioSpec:
    """Initial conditions and scripted traffic for one closed-loop test.

    Gaps are bumper to bumper. The rear vehicle follows ``rear_script``
    unless ``rear_tracker`` is given.
    """

    name: str
    duration: float
    v_target: float
    ego_speed: float
    lead_gap: Optional[float] = None
    lead_speed: float = 0.0
    lead_script: ScriptProfile = ScriptProfile()
    rear_gap: Optional[float] = None
    rear_speed: float = 0.0
    rear_script: ScriptProfile = ScriptProfile()
    rear_tracker: Optional[TrackerParams] = None
    zone: SafetyZoneParams = CAR_ZONE

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if self.ego_speed < 0 or self.lead_speed < 0 or self.rear_speed < 0:
            raise ValueError("initial speeds must be >= 0")
        if self.lead_gap is not None and self.lead_gap <= 0:
            raise ValueError("lead_gap must be > 0")
        if self.rear_gap is not None and self.rear_gap <= 0:
            raise ValueError("rear_gap must be > 0")


def scenario_presets() -> Dict[str, ScenarioSpec]:
    v100 = 100 * KMH
    rear_follower = TrackerParams(time_gap=3.2, v_desired=v100)
    return {
        "emergency_stop": ScenarioSpec(
            name="emergency_stop", duration=30.0, v_target=v100, ego_speed=v100,
            lead_gap=250.0, lead_speed=0.0,
            rear_gap=95.0, rear_speed=v100, rear_tracker=rear_follower,
        ),
        "follow_and_stop": ScenarioSpec(
            name="follow_and_stop", duration=40.0, v_target=v100, ego_speed=v100,
            lead_gap=120.0, lead_speed=80 * KMH, lead_script=ScriptProfile(((0.0, 0.0), (10.0, -6.0))),
            rear_gap=95.0, rear_speed=v100, rear_tracker=rear_follower,
        ),
        "rear_approach": ScenarioSpec(
            name="rear_approach", duration=20.0, v_target=20.0, ego_speed=20.0,
            rear_gap=140.0, rear_speed=25.0,
        ),
        "free_drive": ScenarioSpec(name="free_drive", duration=30.0, v_target=v100, ego_speed=0.0),
        "robot_approach": ScenarioSpec(
            name="robot_approach", duration=20.0, v_target=1.0, ego_speed=1.0,
            lead_gap=8.0, lead_speed=0.0, zone=ROBOT_ZONE,
        ),
    }


def get_scenario(name: str, overrides: Optional[dict] = None) -> ScenarioSpec:
    presets = scenario_presets()
    if name not in presets:
        raise UnknownScenarioError(f"unknown scenario {name!r}; valid names: {', '.join(sorted(presets))}")
    spec = presets[name]
    return replace(spec, **overrides) if overrides else spec


def perturbed(spec: ScenarioSpec, seed: Optional[int]) -> ScenarioSpec:
    """Seeded variation of a preset: initial gaps, speeds and script timing jitter."""
    if seed is None:
        return spec
    rng = np.random.default_rng(seed)
    changes: dict = {"ego_speed": max(0.0, spec.ego_speed + rng.uniform(-1.0, 1.0))}
    if spec.lead_gap is not None:
        changes["lead_gap"] = spec.lead_gap * rng.uniform(0.9, 1.1)
        shift = rng.uniform(-1.0, 1.0)
        changes["lead_script"] = ScriptProfile(tuple(
            (t + shift if t > 0 else t, a * rng.uniform(0.9, 1.0) if a < 0 else a)
            for t, a in spec.lead_script.segments
        ))
    if spec.rear_gap is not None:
        changes["rear_gap"] = spec.rear_gap * rng.uniform(0.9, 1.1)
    return replace(spec, **changes)


def reset_scenario(scenario: ScenarioSpec, cfg: SimConfig) -> WorldState:
    ego = VehicleState(0.0, scenario.ego_speed, cfg.ego_length)
    lead = rear = None
    if scenario.lead_gap is not None:
        lead = VehicleState(scenario.lead_gap + cfg.lead_length, scenario.lead_speed, cfg.lead_length)
    if scenario.rear_gap is not None:
        rear = VehicleState(-cfg.ego_length - scenario.rear_gap, scenario.rear_speed, cfg.rear_length)
    return initial_state(ego, lead, rear, cfg, last_action=0.0)


class ScenarioTraffic:
    """Drives the non-ego vehicles of a scenario step by step."""

    def __init__(self, spec: ScenarioSpec, cfg: SimConfig):
        self.spec = spec
        self.cfg = cfg
        self.tracker = DelayedGapTracker(spec.rear_tracker, cfg.dt) if spec.rear_tracker else None

    def accels(self, state: WorldState) -> Tuple[float, float]:
        t = state.time_step_index * self.cfg.dt
        lead = self.spec.lead_script.accel_at(t) if state.lead is not None else 0.0
        if state.rear is None:
            rear = 0.0
        elif self.tracker is not None:
            rear = self.tracker.accel(state)
        else:
            rear = self.spec.rear_script.accel_at(t)
        return lead, rear


# Question-to-traffic pairing: safety predictors need the vehicle they are about.
_POOL_VEHICLES = {
    CumulantKind.FRONT_SAFETY: (True, False),
    CumulantKind.REAR_SAFETY: (False, True),
    CumulantKind.SPEED: (False, False),
}


class TrafficEnv:
    """Randomized episodes for learning one question from interaction.

    Each episode draws fresh initial speeds, gaps and driver behavior and
    lasts at most ``episode_seconds``; a collision ends it with continuation 0.
    """

    def __init__(self, question, sim_cfg: Optional[SimConfig] = None, zone: SafetyZoneParams = CAR_ZONE,
                 with_lead: Optional[bool] = None, with_rear: Optional[bool] = None,
                 episode_seconds: float = 30.0, oblivious_rear_fraction: float = 0.3,
                 close_start_fraction: float = 0.0):
        self.question = question
        self.cfg = sim_cfg or SimConfig()
        self.zone = zone
        kind = question.kind
        default_lead, default_rear = _POOL_VEHICLES[kind]
        self.with_lead = default_lead if with_lead is None else with_lead
        self.with_rear = default_rear if with_rear is None else with_rear
        if kind is CumulantKind.FRONT_SAFETY and not self.with_lead:
            raise ValueError("front-safety training needs a lead vehicle on the road")
        if kind is CumulantKind.REAR_SAFETY and not self.with_rear:
            raise ValueError("rear-safety training needs a rear vehicle on the road")
        if kind is CumulantKind.SPEED and (self.with_lead or self.with_rear):
            raise ValueError("speed training runs without other vehicles")
        self.feature_names = FEATURES_BY_KIND[kind]
        self.feature_scaling = self.cfg.feature_scaling()
        self.output_scale = self.cfg.speed_scale if kind is CumulantKind.SPEED else 1.0
        self.max_steps = int(round(episode_seconds / self.cfg.dt))
        self.oblivious_rear_fraction = oblivious_rear_fraction
        self.close_start_fraction = close_start_fraction
        self._cont = ContinuationParams(question.gamma)
        self.state: Optional[WorldState] = None

    def reset(self, rng: np.random.Generator):
        cfg = self.cfg
        v_top = min(35.0, cfg.v_max)
        # Close-quarters episodes start slow and near the lead: stop-and-creep states are rare otherwise.
        close = self.with_lead and rng.random() < self.close_start_fraction
        ego = VehicleState(0.0, rng.uniform(0.0, 5.0 if close else v_top), cfg.ego_length)
        lead = rear = None
        self.lead_driver = None
        self.rear_driver = None
        self.tracker = None
        if self.with_lead:
            stationary = rng.random() < (0.5 if close else 0.25)
            v = 0.0 if stationary else rng.uniform(0.0, 5.0 if close else v_top)
            gap = rng.uniform(1.0, 30.0 if close else 220.0)
            lead = VehicleState(gap + cfg.lead_length, v, cfg.lead_length)
            self.lead_driver = RandomDriver(np.random.default_rng(rng.integers(2**63)), stationary)
        if self.with_rear:
            gap = rng.uniform(2.0, 150.0)
            v = max(0.0, ego.speed + rng.uniform(-5.0, 10.0))
            rear = VehicleState(-cfg.ego_length - gap, v, cfg.rear_length)
            # Some rear drivers ignore the ego entirely and may keep closing in.
            oblivious = rng.random() < self.oblivious_rear_fraction
            params = TrackerParams(
                delay=rng.uniform(0.3, 1.2),
                time_gap=rng.uniform(0.5, 3.5),
                k_gap=rng.uniform(0.1, 0.4),
                k_rel=rng.uniform(0.5, 1.5),
                v_desired=rng.uniform(5.0, v_top),
                b_max=rng.uniform(4.0, 8.0),
            )
            rear_seed = rng.integers(2**63)
            if oblivious:
                self.rear_driver = RandomDriver(np.random.default_rng(rear_seed))
            else:
                self.tracker = DelayedGapTracker(params, cfg.dt)
        last = float(rng.uniform(ACTION_LOW, ACTION_HIGH))
        self.state = initial_state(ego, lead, rear, cfg, last_action=last)
        self.t = 0
        return self._obs(self.state), last

    def _obs(self, state: WorldState) -> np.ndarray:
        return extract_features(state, self.cfg).as_array(self.feature_names)

    def step(self, action: float, rng: np.random.Generator):
        state = self.state
        lead_acc = self.lead_driver.accel(self.cfg.dt) if self.lead_driver is not None else 0.0
        if self.tracker is not None:
            rear_acc = self.tracker.accel(state)
        elif self.rear_driver is not None:
            rear_acc = self.rear_driver.accel(self.cfg.dt)
        else:
            rear_acc = 0.0
        outcome = step(state, action, lead_acc, rear_acc, self.cfg)
        self.state = outcome.next_state
        self.t += 1
        gamma = continuation(outcome, self.question.kind, self._cont)
        c = cumulant(self.question.kind, outcome.next_state, self.zone)
        # A zero discount alone (a myopic question) does not end the episode; collisions do.
        done = self.t >= self.max_steps or outcome.front_collision or outcome.rear_collision
        return outcome.features.as_array(self.feature_names), c, gamma, done

    def fork(self, rng: np.random.Generator) -> "TrafficEnv":
        """Independent copy of the current episode whose random lead driver is reseeded from ``rng``."""
        twin = copy.deepcopy(self)
        for driver in (twin.lead_driver, twin.rear_driver):
            if driver is not None:
                driver.rng = np.random.default_rng(rng.integers(2**63))
        twin.max_steps = 2**62
        return twin
