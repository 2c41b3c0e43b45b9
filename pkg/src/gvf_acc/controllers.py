"""Controllers that act on learned predictions, plus a privileged gap-control baseline.

The fuzzy controller sweeps a fixed set of candidate actions and defuzzifies
a product-combined goal set with a greediness-weighted centroid. The two
rule-based controllers nudge the previous action by an amount driven by
a single prediction taken at that previous action.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .cumulants import CAR_ZONE, SafetyZoneParams, headway
from .learner import GvfModel, predict, predict_actions
from .sim import ACTION_HIGH, ACTION_LOW, FeatureVector, WorldState, front_gap


@dataclass(frozen=True)
class FuzzySet:
    """Piecewise-linear membership function given by ``(point, membership)`` knots."""

    knots: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        knots = tuple((float(x), float(m)) for x, m in self.knots)
        if not knots:
            raise ValueError("a fuzzy set needs at least one knot")
        xs = [x for x, _ in knots]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("fuzzy set knot points must be strictly increasing")
        if any(not 0.0 <= m <= 1.0 for _, m in knots):
            raise ValueError("memberships must lie in [0, 1]")
        object.__setattr__(self, "knots", knots)

    def __call__(self, x):
        xs, ms = zip(*self.knots)
        return np.interp(x, xs, ms)


def ramp(lo: float, hi: float) -> FuzzySet:
    return FuzzySet(((lo, 0.0), (hi, 1.0)))


def triangle(peak: float, left: float, right: float, floor: float = 0.0) -> FuzzySet:
    return FuzzySet(((peak - left, floor), (peak, 1.0), (peak + right, floor)))


def default_sweep(n: int = 21, low: float = ACTION_LOW, high: float = ACTION_HIGH) -> Tuple[float, ...]:
    return tuple(np.linspace(low, high, n).tolist())


def default_speed_set(v_target: float, overshoot: float = 3.0) -> FuzzySet:
    """Rises linearly from zero speed to ``v_target``, then falls steeply to a small floor.

    The long left flank keeps faster candidates preferred while well below
    target; a narrow symmetric triangle would give every candidate the same
    membership there.
    """
    left = max(v_target, overshoot)
    return FuzzySet(((v_target - left, 0.05), (v_target, 1.0), (v_target + overshoot, 0.05)))


@dataclass(frozen=True)
class FuzzyControllerConfig:
    v_target: float
    action_sweep: Tuple[float, ...] = field(default_factory=default_sweep)
    greediness: float = 8.0
    safety_set: FuzzySet = ramp(0.6, 0.9)
    speed_set: Optional[FuzzySet] = None
    comfort_set: FuzzySet = triangle(0.0, 4.0, 4.0, floor=0.1)

    def __post_init__(self):
        sweep = tuple(float(a) for a in self.action_sweep)
        if len(sweep) < 2:
            raise ValueError("the action sweep needs at least two candidates")
        if self.greediness < 1:
            raise ValueError("greediness must be >= 1")
        object.__setattr__(self, "action_sweep", sweep)
        if self.speed_set is None:
            object.__setattr__(self, "speed_set", default_speed_set(self.v_target))


def centroid(actions: Sequence[float], goal: Sequence[float], greediness: float = 1.0) -> Optional[float]:
    """Greediness-weighted centroid of a discrete goal set; ``None`` when every membership is zero.

    Memberships are normalized by their maximum before exponentiation so
    large exponents do not underflow; the normalization cancels in the ratio.
    """
    a = np.asarray(actions, dtype=float)
    g = np.asarray(goal, dtype=float)
    if np.any(g < 0):
        raise ValueError("memberships must be nonnegative")
    top = g.max()
    if top <= 0.0:
        return None
    w = (g / top) ** greediness
    return float(w @ a / w.sum())


@dataclass
class FuzzyDecision:
    action: float
    candidates: np.ndarray
    safety: np.ndarray
    speed: np.ndarray
    goal: np.ndarray
    fallback: bool


def fuzzy_decide(cfg: FuzzyControllerConfig, safety_model: GvfModel, speed_model: GvfModel,
                 features: FeatureVector) -> FuzzyDecision:
    cand = np.asarray(cfg.action_sweep)
    safety = predict_actions(safety_model, features, cand)
    speed = predict_actions(speed_model, features, cand)
    goal = cfg.safety_set(safety) * cfg.speed_set(speed) * cfg.comfort_set(cand)
    action = centroid(cand, goal, cfg.greediness)
    fallback = action is None
    if fallback:
        action = float(cand.min())
    return FuzzyDecision(action, cand, safety, speed, goal, fallback)


def fuzzy_act(cfg: FuzzyControllerConfig, safety_model: GvfModel, speed_model: GvfModel,
              features: FeatureVector) -> float:
    """Pick an action from the centroid of the goal set; brake fully when no candidate is acceptable."""
    return fuzzy_decide(cfg, safety_model, speed_model, features).action


@dataclass(frozen=True)
class RuleWithSpeedConfig:
    v_target: float
    beta: float = 0.85
    alpha_decel: float = 0.4
    alpha_speed: float = 0.01
    e_min: float = -5.0
    e_max: float = 5.0
    a_min: float = ACTION_LOW
    a_max: float = ACTION_HIGH

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.e_min > self.e_max:
            raise ValueError("e_min must be <= e_max")
        if not self.a_min < self.a_max:
            raise ValueError("a_min must be < a_max")


def rule_act_with_speed(cfg: RuleWithSpeedConfig, safety_model: GvfModel, speed_model: GvfModel,
                        features: FeatureVector, last_action: float) -> float:
    safe = predict(safety_model, features, last_action)
    speed = predict(speed_model, features, last_action)
    if safe < cfg.beta:
        a = last_action - cfg.alpha_decel * (1.0 - safe)
    else:
        e = max(cfg.e_min, min(cfg.e_max, cfg.v_target - speed))
        a = last_action + cfg.alpha_speed * e
    return min(cfg.a_max, max(cfg.a_min, a))


@dataclass(frozen=True)
class RuleWithoutSpeedConfig:
    """Thresholds and gains for the target-speed rule controller (commands in m/s)."""

    v_target: float
    beta1: float = 0.8
    beta2: float = 0.9
    alpha_decel: float = 0.5
    alpha_accel: float = 0.05
    tracker_gain: float = 0.5

    def __post_init__(self):
        if self.beta1 > self.beta2:
            raise ValueError("beta1 must be <= beta2")
        if self.v_target < 0:
            raise ValueError("v_target must be >= 0")


def rule_act_without_speed(cfg: RuleWithoutSpeedConfig, safety_model: GvfModel, features: FeatureVector,
                           last_action: float, query_action: Optional[float] = None) -> float:
    """Update a target-speed command from one safety prediction.

    The predictor's action input is an actuator command, so it is queried at
    ``query_action`` (default: the command currently applied, read from the
    features) rather than at the target speed itself.
    """
    if query_action is None:
        query_action = features.last_command
    safe = predict(safety_model, features, query_action)
    if safe < cfg.beta1:
        a = last_action - cfg.alpha_decel * (1.0 - safe)
    elif safe > cfg.beta2:
        a = last_action + cfg.alpha_accel * safe
    else:
        a = last_action
    return min(max(a, 0.0), cfg.v_target)


@dataclass(frozen=True)
class SpeedTracker:
    """Low-level layer turning a target speed into a throttle/brake command."""

    gain: float = 0.5

    def command(self, target_speed: float, speed: float) -> float:
        return min(ACTION_HIGH, max(ACTION_LOW, self.gain * (target_speed - speed)))


@dataclass(frozen=True)
class BaselineGapConfig:
    """Gains of the privileged gap controller (command units per metre and per m/s)."""

    v_target: float
    k_gap: float = 0.05
    k_rel: float = 0.1
    k_speed: float = 0.3
    params: SafetyZoneParams = CAR_ZONE
    hold_speed: float = 0.5
    hold_margin: float = 2.0
    hold_brake: float = 0.3

    def __post_init__(self):
        if min(self.k_gap, self.k_rel, self.k_speed) < 0:
            raise ValueError("gains must be >= 0")
        if min(self.hold_speed, self.hold_margin, self.hold_brake) < 0:
            raise ValueError("stop-and-hold settings must be >= 0")


def baseline_act(cfg: BaselineGapConfig, state: WorldState) -> float:
    """Spacing-plus-closing-speed feedback on ground truth, capped by speed tracking.

    Near standstill close behind the lead it brakes to hold: with no drag,
    a near-zero command would otherwise let the ego creep forward.
    """
    v = state.ego.speed
    command = cfg.k_speed * (cfg.v_target - v)
    if state.lead is not None:
        spacing_error = front_gap(state) - headway(v, cfg.params)
        follow = cfg.k_gap * spacing_error + cfg.k_rel * (state.lead.speed - v)
        command = min(command, follow)
        if v < cfg.hold_speed and spacing_error < cfg.hold_margin and state.lead.speed < cfg.hold_speed:
            command = min(command, -cfg.hold_brake)
    return min(ACTION_HIGH, max(ACTION_LOW, command))
