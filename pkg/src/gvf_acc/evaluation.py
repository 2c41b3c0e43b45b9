"""Closed-loop scenario runs, trajectory metrics and return oracles."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import controllers as ctl
from .cumulants import CumulantKind, front_safety_cumulant, headway, rear_safety_cumulant
from .learner import GvfModel, predict_actions
from .scenarios import ScenarioSpec, ScenarioTraffic, TrafficEnv, perturbed, reset_scenario
from .sim import SimConfig, WorldState, extract_features, front_gap, rear_gap, step

CONTROLLERS = ("fuzzy", "rule_with_speed", "rule_without_speed", "baseline")
REST_SPEED = 0.1
MC_RESIDUAL = 1e-6

EXPORT_COLUMNS = (
    "t", "x_ego", "v_ego", "x_lead", "v_lead", "x_rear", "v_rear", "action",
    "c_front", "c_rear", "pred_front", "pred_rear", "pred_speed",
    "gap_front", "gap_rear", "h_front", "h_rear",
)


class ModelMismatchError(ValueError):
    """A controller was given a model answering the wrong question (or none)."""


# ---------------------------------------------------------------- return oracles


def mc_return(rollout: Iterable[Tuple[float, float]], residual_bound: float = MC_RESIDUAL) -> float:
    """Discounted sum of already-scaled cumulants along one trajectory.

    ``rollout`` holds ``(c, gamma)`` per transition. Each cumulant is weighted
    by the product of the continuations of the transitions before it, so
    ``G = c1 + g1*c2 + g1*g2*c3 + ...`` (the return bootstrapped by TD).
    The rollout must either terminate (a zero continuation) or be long
    enough that the remaining discount is below ``residual_bound``.
    """
    total = 0.0
    weight = 1.0
    for c, gamma in rollout:
        total += weight * c
        weight *= gamma
        if weight == 0.0:
            return total
    if weight > residual_bound:
        raise ValueError(f"rollout too short: residual discount {weight:.3g} exceeds {residual_bound:g}")
    return total


def build_tabular_oracle(length: int, gamma: float, cumulants: Sequence[float], terminal: bool = True) -> np.ndarray:
    """Exact values of a deterministic left-to-right chain by back-substitution.

    Leaving state ``i`` pays ``cumulants[i]`` (already scaled). The last state
    either terminates or, with ``terminal=False``, loops onto itself.
    """
    if length < 2:
        raise ValueError("chain length must be >= 2")
    c = np.asarray(cumulants, dtype=float)
    if c.shape != (length,):
        raise ValueError(f"expected {length} cumulants")
    v = np.zeros(length)
    v[-1] = c[-1] if terminal else c[-1] / (1.0 - gamma)
    for i in range(length - 2, -1, -1):
        v[i] = c[i] + gamma * v[i + 1]
    return v


def chain_transition_matrix(length: int, terminal: bool = True) -> np.ndarray:
    P = np.zeros((length, length))
    for i in range(length - 1):
        P[i, i + 1] = 1.0
    if not terminal:
        P[-1, -1] = 1.0
    return P


class ChainEnv:
    """Deterministic chain with one-hot observations, for checking TD against exact values.

    ``raw_cumulants[i]`` is paid on leaving state ``i``; the learner applies
    the usual ``1 - gamma`` scaling, so the matching scaled vector is
    :meth:`scaled_cumulants`.
    """

    def __init__(self, question, raw_cumulants: Sequence[float], terminal: bool = True):
        from .cumulants import CAR_ZONE

        self.question = question
        self.raw = np.asarray(raw_cumulants, dtype=float)
        self.length = len(self.raw)
        self.terminal = terminal
        self.feature_names = tuple(f"state_{i}" for i in range(self.length))
        self.feature_scaling: dict = {}
        self.output_scale = 1.0
        self.zone = CAR_ZONE
        self._i = 0

    def _obs(self, i: Optional[int]) -> np.ndarray:
        x = np.zeros(self.length)
        if i is not None:
            x[i] = 1.0
        return x

    def scaled_cumulants(self) -> np.ndarray:
        g = self.question.gamma
        c = self.raw * (1.0 - g)
        if self.terminal:
            c[-1] = self.raw[-1]
        return c

    def reset(self, rng):
        self._i = 0
        return self._obs(0), 0.0

    def step(self, action, rng):
        i = self._i
        g = self.question.gamma
        if i == self.length - 1:
            if self.terminal:
                return self._obs(None), self.raw[i], 0.0, True
            return self._obs(i), self.raw[i], g, False
        self._i = i + 1
        return self._obs(i + 1), self.raw[i], g, False


# ---------------------------------------------------------------- scenario runs


@dataclass
class ModelSet:
    front: Optional[GvfModel] = None
    rear: Optional[GvfModel] = None
    speed: Optional[GvfModel] = None

    def check(self) -> None:
        for slot, kind in (("front", CumulantKind.FRONT_SAFETY), ("rear", CumulantKind.REAR_SAFETY),
                           ("speed", CumulantKind.SPEED)):
            m = getattr(self, slot)
            if m is not None and m.kind is not kind:
                raise ModelMismatchError(f"{slot} slot holds a {m.kind.value} model")

    def counts(self) -> Dict[str, int]:
        return {slot: (getattr(self, slot).query_count if getattr(self, slot) is not None else 0)
                for slot in ("front", "rear", "speed")}


REQUIRED_MODELS = {
    "fuzzy": ("front", "speed"),
    "rule_with_speed": ("front", "speed"),
    "rule_without_speed": ("front",),
    "baseline": (),
}


@dataclass
class Metrics:
    collided: bool
    min_front_gap: Optional[float]
    final_gap_at_rest: Optional[float]
    max_decel: float
    safety_violation_time: float
    speed_rmse_to_target: float
    rear_warning_lead_time: Optional[float]
    empty: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Metrics":
        return cls(**json.loads(text))


@dataclass
class ScenarioResult:
    scenario: str
    controller: str
    dt: float
    columns: Dict[str, np.ndarray]
    metrics: Metrics
    front_collision: bool
    rear_collision: bool
    controller_queries: Dict[str, int] = field(default_factory=dict)

    @property
    def truncated(self) -> bool:
        return self.front_collision or self.rear_collision

    def __len__(self) -> int:
        return len(self.columns["t"])

    def to_csv(self) -> str:
        lines = [",".join(EXPORT_COLUMNS)]
        cols = [self.columns[c].tolist() for c in EXPORT_COLUMNS]
        for row in zip(*cols):
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def write(self, csv_path, metrics_path=None) -> None:
        with open(csv_path, "w", newline="") as fh:
            fh.write(self.to_csv())
        if metrics_path is not None:
            with open(metrics_path, "w") as fh:
                fh.write(self.metrics.to_json())


def read_result_csv(path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != EXPORT_COLUMNS:
        raise ValueError(f"{path}: unexpected header")
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(EXPORT_COLUMNS))
    return {name: data[:, i] for i, name in enumerate(EXPORT_COLUMNS)}


def default_controller_config(controller: str, spec: ScenarioSpec):
    if controller == "fuzzy":
        return ctl.FuzzyControllerConfig(v_target=spec.v_target)
    if controller == "rule_with_speed":
        return ctl.RuleWithSpeedConfig(v_target=spec.v_target)
    if controller == "rule_without_speed":
        return ctl.RuleWithoutSpeedConfig(v_target=spec.v_target)
    if controller == "baseline":
        return ctl.BaselineGapConfig(v_target=spec.v_target, params=spec.zone)
    raise ValueError(f"unknown controller {controller!r}; valid: {', '.join(CONTROLLERS)}")


def _nan_if_none(x):
    return math.nan if x is None else x


def run_scenario(spec: ScenarioSpec, controller: str, models: Optional[ModelSet] = None,
                 sim_cfg: Optional[SimConfig] = None, controller_cfg=None, seed: Optional[int] = None,
                 warning_threshold: float = 0.5) -> ScenarioResult:
    """Closed-loop rollout of ``controller`` on ``spec`` (perturbed by ``seed`` when given).

    Every available model is also queried passively at the applied action
    for logging; only the queries made inside the controller count towards
    ``controller_queries``.
    """
    if controller not in CONTROLLERS:
        raise ValueError(f"unknown controller {controller!r}; valid: {', '.join(CONTROLLERS)}")
    models = models or ModelSet()
    models.check()
    for slot in REQUIRED_MODELS[controller]:
        if getattr(models, slot) is None:
            raise ModelMismatchError(f"controller {controller!r} needs a {slot} model")
    sim_cfg = sim_cfg or SimConfig()
    spec = perturbed(spec, seed)
    cfg = controller_cfg or default_controller_config(controller, spec)
    tracker = ctl.SpeedTracker(cfg.tracker_gain) if controller == "rule_without_speed" else None

    traffic = ScenarioTraffic(spec, sim_cfg)
    state = reset_scenario(spec, sim_cfg)
    n_steps = int(round(spec.duration / sim_cfg.dt))
    rows: List[list] = []
    queries = {"front": 0, "rear": 0, "speed": 0}
    target_speed = spec.ego_speed  # command state of the target-speed controller
    front_hit = rear_hit = False

    def log_row(s: WorldState, action: Optional[float]):
        feats = extract_features(s, sim_cfg)
        preds = []
        for slot in ("front", "rear", "speed"):
            m = getattr(models, slot)
            if m is None or action is None:
                preds.append(math.nan)
            else:
                preds.append(float(predict_actions(m, feats, [action])[0]))
        fg, rg = front_gap(s), rear_gap(s)
        h_front = headway(s.ego.speed, spec.zone)
        h_rear = headway(s.rear.speed, spec.zone) if s.rear is not None else math.nan
        c_front = front_safety_cumulant(fg, s.ego.speed, spec.zone) if s.lead is not None else 1
        c_rear = rear_safety_cumulant(rg, s.rear.speed, spec.zone) if s.rear is not None else 1
        rows.append([
            s.time_step_index * sim_cfg.dt,
            s.ego.position, s.ego.speed,
            s.lead.position if s.lead else math.nan, s.lead.speed if s.lead else math.nan,
            s.rear.position if s.rear else math.nan, s.rear.speed if s.rear else math.nan,
            _nan_if_none(action), c_front, c_rear, *preds, fg, rg, h_front, h_rear,
        ])

    for _ in range(n_steps):
        feats = extract_features(state, sim_cfg)
        before = models.counts()
        if controller == "fuzzy":
            action = ctl.fuzzy_act(cfg, models.front, models.speed, feats)
        elif controller == "rule_with_speed":
            action = ctl.rule_act_with_speed(cfg, models.front, models.speed, feats, state.last_action)
        elif controller == "rule_without_speed":
            target_speed = ctl.rule_act_without_speed(cfg, models.front, feats, target_speed)
            action = tracker.command(target_speed, state.ego.speed)
        else:
            action = ctl.baseline_act(cfg, state)
        after = models.counts()
        for k in queries:
            queries[k] += after[k] - before[k]
        log_row(state, action)
        lead_acc, rear_acc = traffic.accels(state)
        outcome = step(state, action, lead_acc, rear_acc, sim_cfg)
        state = outcome.next_state
        if outcome.front_collision or outcome.rear_collision:
            front_hit, rear_hit = outcome.front_collision, outcome.rear_collision
            break
    log_row(state, None)

    columns = {name: np.array(col, dtype=float) for name, col in zip(EXPORT_COLUMNS, zip(*rows))}
    result = ScenarioResult(spec.name, controller, sim_cfg.dt, columns, None, front_hit, rear_hit, queries)
    result.metrics = compute_metrics(result, spec.v_target, warning_threshold)
    return result


def rear_warning_lead_time(result: ScenarioResult, threshold: float = 0.5) -> Optional[float]:
    """Seconds between the first rear prediction below ``threshold`` and the first unsafe rear cumulant.

    ``None`` when the rear cumulant never drops or no warning is ever
    raised; negative when the warning comes late.
    """
    t = result.columns["t"]
    c = result.columns["c_rear"]
    p = result.columns["pred_rear"]
    drops = np.flatnonzero(c == 0)
    if drops.size == 0:
        return None
    with np.errstate(invalid="ignore"):
        warns = np.flatnonzero(p < threshold)
    if warns.size == 0:
        return None
    return float(t[drops[0]] - t[warns[0]])


def compute_metrics(result: ScenarioResult, v_target: float, warning_threshold: float = 0.5) -> Metrics:
    cols = result.columns
    v = cols["v_ego"]
    gaps = cols["gap_front"]
    has_lead = np.isfinite(cols["x_lead"]).any()
    empty = len(v) <= 1
    min_gap = float(np.min(gaps)) if has_lead else None
    at_rest = v[-1] < REST_SPEED
    decel = -np.diff(v) / result.dt if len(v) > 1 else np.zeros(0)
    has_rear_preds = np.isfinite(cols["pred_rear"]).any()
    return Metrics(
        collided=result.front_collision or result.rear_collision,
        min_front_gap=min_gap,
        final_gap_at_rest=float(gaps[-1]) if (has_lead and at_rest) else None,
        max_decel=float(max(decel.max(), 0.0)) if decel.size else 0.0,
        safety_violation_time=float(np.count_nonzero(cols["c_front"] == 0) * result.dt),
        speed_rmse_to_target=float(np.sqrt(np.mean((v - v_target) ** 2))),
        rear_warning_lead_time=rear_warning_lead_time(result, warning_threshold) if has_rear_preds else None,
        empty=empty,
    )


# ---------------------------------------------------------------- horizon sweep


def crossing_time(result: ScenarioResult, threshold: float = 0.5, column: str = "pred_front") -> Optional[float]:
    """First time the prediction falls from at/above ``threshold`` to below it."""
    p = result.columns[column]
    t = result.columns["t"]
    for k in range(1, len(p)):
        if p[k - 1] >= threshold > p[k]:
            return float(t[k])
    return None


SWEEP_DRIVERS = ("cruise",) + CONTROLLERS


def cruise_probe_config(spec: ScenarioSpec) -> ctl.BaselineGapConfig:
    """Speed tracking only: the ego holds its cruise speed and ignores the lead.

    At the target speed the command stays at zero, which is exactly the
    "keep doing what I'm doing" behavior the predictions are about, so the
    crossing times measure anticipation rather than a controller's reaction.
    The run ends in a collision unless the scenario is benign.
    """
    return ctl.BaselineGapConfig(v_target=spec.v_target, k_gap=0.0, k_rel=0.0, params=spec.zone,
                                 hold_speed=0.0)


@dataclass
class SweepResult:
    results: Dict[float, ScenarioResult]
    table: List[Tuple[float, Optional[float]]]

    def table_csv(self) -> str:
        lines = ["gamma,crossing_time"]
        for g, t in self.table:
            lines.append(f"{g!r},{'' if t is None else repr(t)}")
        return "\n".join(lines) + "\n"

    def ordered(self) -> bool:
        """Crossing times non-increasing in gamma (a missing crossing counts as never)."""
        times = [math.inf if t is None else t for _, t in sorted(self.table)]
        return all(b <= a for a, b in zip(times, times[1:]))


def horizon_sweep(spec: ScenarioSpec, front_models: Dict[float, GvfModel], gammas: Sequence[float],
                  driver: str = "cruise", support: Optional[ModelSet] = None,
                  sim_cfg: Optional[SimConfig] = None, threshold: float = 0.5,
                  seed: Optional[int] = None, controller_cfg=None) -> SweepResult:
    """Run ``spec`` once per gamma, logging that gamma's front prediction, and tabulate crossing times.

    ``driver`` is one of :data:`SWEEP_DRIVERS`; ``"cruise"`` is the
    lead-blind probe from :func:`cruise_probe_config`.
    """
    if driver not in SWEEP_DRIVERS:
        raise ValueError(f"unknown sweep driver {driver!r}; valid: {', '.join(SWEEP_DRIVERS)}")
    controller = driver
    if driver == "cruise":
        controller = "baseline"
        controller_cfg = controller_cfg or cruise_probe_config(perturbed(spec, seed))
    results = {}
    table = []
    support = support or ModelSet()
    for g in gammas:
        if g not in front_models:
            raise KeyError(f"no front-safety model for gamma={g}")
        models = replace(support, front=front_models[g])
        res = run_scenario(spec, controller, models, sim_cfg, controller_cfg, seed=seed,
                           warning_threshold=threshold)
        res.controller = driver
        results[g] = res
        table.append((g, crossing_time(res, threshold)))
    return SweepResult(results, table)


# ---------------------------------------------------------------- held-out Monte-Carlo scoring


def _walk(last: float, sigma: float, rng: np.random.Generator) -> float:
    a = last + sigma * rng.standard_normal()
    return -1.0 if a < -1.0 else 1.0 if a > 1.0 else a


def _rollout_return(env: TrafficEnv, first_action: float, sigma: float, rng: np.random.Generator,
                    max_steps: int) -> float:
    scale = 1.0 / env.output_scale
    trace = []
    weight = 1.0
    a = first_action
    for _ in range(max_steps):
        _, c_raw, g, _ = env.step(a, rng)
        trace.append(((1.0 - g) * c_raw * scale, g))
        weight *= g
        if weight <= MC_RESIDUAL:
            break
        a = _walk(a, sigma, rng)
    return mc_return(trace)


def on_policy_returns(model: GvfModel, env: TrafficEnv, n_points: int, rollouts_per_point: int = 4,
                      seed: int = 12345, max_prefix_seconds: float = 20.0) -> Tuple[np.ndarray, np.ndarray]:
    """Predictions and Monte-Carlo returns at states visited by the target policy.

    Each point starts a fresh episode, follows the target policy for a random
    prefix, then scores ``q(s, a)`` against the average return of
    ``rollouts_per_point`` independent continuations.
    """
    rng = np.random.default_rng(seed)
    sigma = model.question.sigma
    gamma = model.question.gamma
    max_steps = int(math.ceil(math.log(MC_RESIDUAL) / math.log(gamma))) + 2 if gamma > 0 else 1
    preds = np.empty(n_points)
    rets = np.empty(n_points)
    i = 0
    while i < n_points:
        obs, last = env.reset(rng)
        prefix = int(rng.integers(0, int(max_prefix_seconds / env.cfg.dt)))
        a = _walk(last, sigma, rng)
        ok = True
        for _ in range(prefix):
            obs, _, g, done = env.step(a, rng)
            if g == 0.0:
                ok = False
                break
            a = _walk(a, sigma, rng)
        if not ok:
            continue
        preds[i] = predict_actions(model, obs, [a])[0] / model.output_scale
        samples = []
        for _ in range(rollouts_per_point):
            branch = env.fork(rng)
            samples.append(_rollout_return(branch, a, sigma, rng, max_steps))
        rets[i] = float(np.mean(samples))
        i += 1
    return preds, rets
