"""Pseudo-rewards and continuation for the safety and speed predictions."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .sim import StepOutcome, WorldState, front_gap, rear_gap


class CumulantKind(str, enum.Enum):
    FRONT_SAFETY = "front"
    REAR_SAFETY = "rear"
    SPEED = "speed"


@dataclass(frozen=True)
class SafetyZoneParams:
    """Speed-proportional safety zone: length ``d_min + speed * tau``."""

    tau: float = 3.0
    d_min: float = 4.0
    beta_f: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.d_min >= 0:
            raise ValueError("d_min must be >= 0")
        if not self.beta_f >= 0:
            raise ValueError("beta_f must be >= 0")


CAR_ZONE = SafetyZoneParams(tau=3.0, d_min=4.0, beta_f=0)
ROBOT_ZONE = SafetyZoneParams(tau=1.5, d_min=0.4, beta_f=0)


@dataclass(frozen=True)
class ContinuationParams:
    gamma_const: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.gamma_const < 1.0:
            raise ValueError(f"gamma_const must lie in [0, 1), got {self.gamma_const}")


def headway(speed: float, params: SafetyZoneParams) -> float:
    if speed < 0:
        raise ValueError(f"speed must be >= 0, got {speed}")
    return params.d_min + speed * params.tau


def _zone_cumulant(gap: float, speed: float, params: SafetyZoneParams) -> int:
    # One-lane reduction: at most one intruding "point", the other vehicle's near face.
    n_inside = 1 if gap < headway(speed, params) else 0
    return 0 if n_inside > params.beta_f else 1


def front_safety_cumulant(front_gap: float, ego_speed: float, params: SafetyZoneParams) -> int:
    """1 when the front zone is clear, 0 when the lead vehicle intrudes."""
    return _zone_cumulant(front_gap, ego_speed, params)


def rear_safety_cumulant(rear_gap: float, rear_speed: float, params: SafetyZoneParams) -> int:
    """Mirror of the front cumulant; the zone is sized by the rear vehicle's speed."""
    return _zone_cumulant(rear_gap, rear_speed, params)


def speed_cumulant(ego_speed: float) -> float:
    if ego_speed < 0:
        raise ValueError(f"speed must be >= 0, got {ego_speed}")
    return float(ego_speed)


def cumulant(kind: CumulantKind, state: WorldState, params: SafetyZoneParams) -> float:
    """Raw (unscaled) cumulant of ``kind`` observed in ``state``."""
    if kind is CumulantKind.FRONT_SAFETY:
        if state.lead is None:
            return 1.0
        return float(front_safety_cumulant(front_gap(state), state.ego.speed, params))
    if kind is CumulantKind.REAR_SAFETY:
        if state.rear is None:
            return 1.0
        return float(rear_safety_cumulant(rear_gap(state), state.rear.speed, params))
    return speed_cumulant(state.ego.speed)


def continuation(outcome: StepOutcome, which: CumulantKind, params: ContinuationParams) -> float:
    """Discount for the step that produced ``outcome``; 0 ends the return on a collision."""
    if which is CumulantKind.FRONT_SAFETY and outcome.front_collision:
        return 0.0
    if which is CumulantKind.REAR_SAFETY and outcome.rear_collision:
        return 0.0
    return params.gamma_const


def scale_cumulant(c_raw: float, gamma_next: float) -> float:
    """Normalize by ``1 - gamma_next`` so constant cumulants have return equal to themselves."""
    if not 0.0 <= gamma_next < 1.0:
        raise ValueError(f"gamma_next must lie in [0, 1), got {gamma_next}")
    if not math.isfinite(c_raw):
        raise ValueError("cumulant must be finite")
    return (1.0 - gamma_next) * c_raw
