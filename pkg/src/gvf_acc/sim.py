"""Single-lane longitudinal traffic simulator.

Vehicles are point masses with a length. ``position`` is the front bumper,
so a vehicle occupies ``[position - length, position]`` on the road.
Integration is semi-implicit Euler at a fixed step: speed first, then
position with the new speed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

ACTION_LOW = -1.0
ACTION_HIGH = 1.0


@dataclass(frozen=True)
class VehicleState:
    position: float
    speed: float
    length: float = 4.5

    def __post_init__(self):
        if not self.speed >= 0.0:
            raise ValueError(f"vehicle speed must be >= 0, got {self.speed}")
        if not self.length > 0.0:
            raise ValueError(f"vehicle length must be > 0, got {self.length}")


@dataclass(frozen=True)
class SimConfig:
    """Physical and sensing constants of the simulator.

    ``engine_curve_knots`` scales available throttle acceleration with speed
    (piecewise linear, clamped beyond the outer knots). The feature scaling
    constants are part of the config because trained models depend on them.
    """

    dt: float = 0.05
    a_max_throttle: float = 3.0
    a_max_brake: float = 6.0
    v_max: float = 40.0
    engine_curve_knots: Tuple[Tuple[float, float], ...] = ((0.0, 1.0), (15.0, 0.7), (30.0, 0.4))
    ego_length: float = 4.5
    lead_length: float = 4.5
    rear_length: float = 4.5
    seed: int = 0
    sensor_range: float = 200.0
    gap_change_scale: float = 2.0
    speed_scale: float = 40.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not (self.a_max_throttle > 0 and self.a_max_brake > 0):
            raise ValueError("acceleration limits must be > 0")
        if not self.v_max > 0:
            raise ValueError("v_max must be > 0")
        knots = tuple((float(s), float(k)) for s, k in self.engine_curve_knots)
        if not knots:
            raise ValueError("engine_curve_knots must not be empty")
        speeds = [s for s, _ in knots]
        if any(b <= a for a, b in zip(speeds, speeds[1:])):
            raise ValueError("engine_curve_knots speeds must be strictly increasing")
        if any(not (0.0 < k <= 1.0) for _, k in knots):
            raise ValueError("engine_curve_knots scales must lie in (0, 1]")
        object.__setattr__(self, "engine_curve_knots", knots)
        if not (self.sensor_range > 0 and self.gap_change_scale > 0 and self.speed_scale > 0):
            raise ValueError("feature scaling constants must be > 0")

    def feature_scaling(self) -> dict:
        return {
            "sensor_range": self.sensor_range,
            "gap_change_scale": self.gap_change_scale,
            "speed_scale": self.speed_scale,
        }


@dataclass(frozen=True)
class WorldState:
    ego: VehicleState
    lead: Optional[VehicleState] = None
    rear: Optional[VehicleState] = None
    last_action: float = 0.0
    prev_front_gap: float = 0.0
    prev_prev_front_gap: float = 0.0
    prev_rear_gap: float = 0.0
    prev_prev_rear_gap: float = 0.0
    time_step_index: int = 0


FEATURE_NAMES = (
    "front_gap",
    "d_gap",
    "d_gap_prev",
    "ego_speed",
    "last_command",
    "rear_gap",
    "d_rear_gap",
    "d_rear_gap_prev",
)


@dataclass(frozen=True)
class FeatureVector:
    """Scaled observation. Gaps map [0, sensor_range] onto [-1, 1]."""

    front_gap: float
    d_gap: float
    d_gap_prev: float
    ego_speed: float
    last_command: float
    rear_gap: float = 1.0
    d_rear_gap: float = 0.0
    d_rear_gap_prev: float = 0.0

    def as_array(self, names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=float)


@dataclass(frozen=True)
class StepOutcome:
    next_state: WorldState
    front_collision: bool
    rear_collision: bool
    features: FeatureVector = field(repr=False)


def front_gap(state: WorldState) -> float:
    """Bumper-to-bumper distance to the lead vehicle, ``inf`` without one."""
    if state.lead is None:
        return math.inf
    return state.lead.position - state.lead.length - state.ego.position


def rear_gap(state: WorldState) -> float:
    if state.rear is None:
        return math.inf
    return state.ego.position - state.ego.length - state.rear.position


def sensed_gap(gap: float, cfg: SimConfig) -> float:
    """Gap as seen by a range-limited sensor: clipped to [0, sensor_range]."""
    return min(max(gap, 0.0), cfg.sensor_range)


def engine_curve(speed: float, cfg: SimConfig) -> float:
    knots = cfg.engine_curve_knots
    if speed <= knots[0][0]:
        return knots[0][1]
    if speed >= knots[-1][0]:
        return knots[-1][1]
    for (s0, k0), (s1, k1) in zip(knots, knots[1:]):
        if speed <= s1:
            return k0 + (k1 - k0) * (speed - s0) / (s1 - s0)
    return knots[-1][1]  # pragma: no cover


def command_to_accel(command: float, speed: float, cfg: SimConfig) -> float:
    if command >= 0.0:
        return command * cfg.a_max_throttle * engine_curve(speed, cfg)
    return command * cfg.a_max_brake


def _advance(vehicle: VehicleState, accel: float, cfg: SimConfig) -> VehicleState:
    v = min(max(vehicle.speed + accel * cfg.dt, 0.0), cfg.v_max)
    return VehicleState(vehicle.position + v * cfg.dt, v, vehicle.length)


def step(
    state: WorldState,
    ego_action: float,
    lead_script_accel: float,
    rear_script_accel: float,
    cfg: SimConfig,
) -> StepOutcome:
    """Advance the world by one ``cfg.dt``.

    ``ego_action`` is the throttle/brake command in [-1, 1]; the scripted
    vehicles take accelerations in m/s^2 (ignored when the vehicle is
    absent).
    """
    for name, value in (("ego_action", ego_action), ("lead_script_accel", lead_script_accel),
                        ("rear_script_accel", rear_script_accel)):
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value}")
    if not ACTION_LOW <= ego_action <= ACTION_HIGH:
        raise ValueError(f"ego_action {ego_action} outside [{ACTION_LOW}, {ACTION_HIGH}]")

    ego = _advance(state.ego, command_to_accel(ego_action, state.ego.speed, cfg), cfg)
    lead = None if state.lead is None else _advance(state.lead, lead_script_accel, cfg)
    rear = None if state.rear is None else _advance(state.rear, rear_script_accel, cfg)

    nxt = WorldState(
        ego=ego,
        lead=lead,
        rear=rear,
        last_action=float(ego_action),
        prev_front_gap=sensed_gap(front_gap(state), cfg),
        prev_prev_front_gap=state.prev_front_gap,
        prev_rear_gap=sensed_gap(rear_gap(state), cfg),
        prev_prev_rear_gap=state.prev_rear_gap,
        time_step_index=state.time_step_index + 1,
    )
    return StepOutcome(
        next_state=nxt,
        front_collision=lead is not None and front_gap(nxt) <= 0.0,
        rear_collision=rear is not None and rear_gap(nxt) <= 0.0,
        features=extract_features(nxt, cfg),
    )


def initial_state(
    ego: VehicleState,
    lead: Optional[VehicleState] = None,
    rear: Optional[VehicleState] = None,
    cfg: Optional[SimConfig] = None,
    last_action: float = 0.0,
) -> WorldState:
    """World state with a flat gap history (zero gap changes)."""
    cfg = cfg or SimConfig()
    state = WorldState(ego=ego, lead=lead, rear=rear, last_action=last_action)
    fg = sensed_gap(front_gap(state), cfg)
    rg = sensed_gap(rear_gap(state), cfg)
    return replace(state, prev_front_gap=fg, prev_prev_front_gap=fg, prev_rear_gap=rg, prev_prev_rear_gap=rg)


def extract_features(state: WorldState, cfg: SimConfig) -> FeatureVector:
    fg = sensed_gap(front_gap(state), cfg)
    rg = sensed_gap(rear_gap(state), cfg)
    rng_, dscale = cfg.sensor_range, cfg.gap_change_scale
    return FeatureVector(
        front_gap=2.0 * fg / rng_ - 1.0,
        d_gap=(fg - state.prev_front_gap) / dscale,
        d_gap_prev=(state.prev_front_gap - state.prev_prev_front_gap) / dscale,
        ego_speed=2.0 * state.ego.speed / cfg.speed_scale - 1.0,
        last_command=state.last_action,
        rear_gap=2.0 * rg / rng_ - 1.0,
        d_rear_gap=(rg - state.prev_rear_gap) / dscale,
        d_rear_gap_prev=(state.prev_rear_gap - state.prev_prev_rear_gap) / dscale,
    )
