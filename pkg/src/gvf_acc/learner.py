"""TD(0) learning of action-conditioned general value functions.

The training loop follows the usual replay recipe: act with the behavior
policy, store ``(s, a, c, gamma, s', a')`` with ``a'`` drawn from the target
policy, and after every environment step take one gradient step on a
uniformly sampled minibatch. The bootstrap term ``gamma * q(s', a')`` is
treated as a constant target.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import network
from .cumulants import CumulantKind, SafetyZoneParams, scale_cumulant
from .network import DenseNet, OptimizerState, apply_update
from .sim import ACTION_HIGH, ACTION_LOW, FeatureVector

log = logging.getLogger(__name__)

FEATURES_BY_KIND: Dict[CumulantKind, Tuple[str, ...]] = {
    CumulantKind.FRONT_SAFETY: ("front_gap", "d_gap", "d_gap_prev", "ego_speed", "last_command"),
    CumulantKind.REAR_SAFETY: ("rear_gap", "d_rear_gap", "d_rear_gap_prev", "ego_speed", "last_command"),
    CumulantKind.SPEED: ("ego_speed", "last_command"),
}


class TrainingDivergedError(RuntimeError):
    """The TD loss became non-finite."""


@dataclass(frozen=True)
class Question:
    """Predictive question: which cumulant, its discount, and the target policy width."""

    kind: CumulantKind
    gamma: float
    sigma: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kind", CumulantKind(self.kind))
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def _clamp(a: float, low: float, high: float) -> float:
    return low if a < low else high if a > high else a


@dataclass(frozen=True)
class TargetPolicy:
    """Gaussian centred on the previous action: "keep doing what I'm doing"."""

    sigma: float = 0.05
    low: float = ACTION_LOW
    high: float = ACTION_HIGH

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def sample(self, last_action: float, rng: np.random.Generator) -> float:
        return _clamp(last_action + self.sigma * rng.standard_normal(), self.low, self.high)


@dataclass(frozen=True)
class BehaviorPolicy:
    """Clamped Gaussian random walk over actions with occasional uniform restarts."""

    sigma: float = 0.05
    reset_probability: float = 0.01
    low: float = ACTION_LOW
    high: float = ACTION_HIGH

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.reset_probability <= 1.0:
            raise ValueError("reset_probability must lie in [0, 1]")

    def sample(self, last_action: float, rng: np.random.Generator) -> float:
        if rng.random() < self.reset_probability:
            return float(rng.uniform(self.low, self.high))
        return _clamp(last_action + self.sigma * rng.standard_normal(), self.low, self.high)


def sample_target_action(policy: TargetPolicy, last_action: float, rng: np.random.Generator) -> float:
    return policy.sample(last_action, rng)


def sample_behavior_action(policy: BehaviorPolicy, last_action: float, rng: np.random.Generator) -> float:
    return policy.sample(last_action, rng)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: float
    c: float
    gamma: float
    s_next: np.ndarray
    a_next: float

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not math.isfinite(self.c):
            raise ValueError("cumulant must be finite")


class Batch(NamedTuple):
    inputs: np.ndarray
    c: np.ndarray
    gamma: np.ndarray
    next_inputs: np.ndarray


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions stored in one preallocated array.

    Each row is ``[s, a, s', a', c, gamma]`` so the network inputs ``[s, a]``
    and ``[s', a']`` are contiguous slices.
    """

    def __init__(self, capacity: int, obs_dim: int, rng_seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs_dim = int(obs_dim)
        self.rng_seed = rng_seed
        self._rng = np.random.default_rng(rng_seed)
        self._w = self.obs_dim + 1
        self._rows = np.zeros((self.capacity, 2 * self._w + 2))
        self._head = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a: float, c: float, gamma: float, s_next, a_next: float) -> None:
        w = self._w
        row = self._rows[self._head]
        row[:w - 1] = s
        row[w - 1] = a
        row[w:2 * w - 1] = s_next
        row[2 * w - 1] = a_next
        row[2 * w] = c
        row[2 * w + 1] = gamma
        self._head = (self._head + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def push(self, t: Transition) -> None:
        self.add(t.s, t.a, t.c, t.gamma, t.s_next, t.a_next)

    def _order(self) -> np.ndarray:
        start = self._head if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def transitions(self) -> List[Transition]:
        """Stored transitions, oldest first."""
        w = self._w
        out = []
        for i in self._order():
            r = self._rows[i]
            out.append(Transition(r[:w - 1].copy(), float(r[w - 1]), float(r[2 * w]), float(r[2 * w + 1]),
                                  r[w:2 * w - 1].copy(), float(r[2 * w - 1])))
        return out

    def sample_indices(self, m: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        if m < 1:
            raise ValueError("minibatch size must be >= 1")
        rng = self._rng if rng is None else rng
        return rng.integers(0, self._size, size=m)

    def batch(self, idx: np.ndarray) -> Batch:
        rows = self._rows[idx]
        w = self._w
        return Batch(rows[:, :w], rows[:, 2 * w], rows[:, 2 * w + 1], rows[:, w:2 * w])

    def sample(self, m: int, rng: Optional[np.random.Generator] = None) -> Batch:
        return self.batch(self.sample_indices(m, rng))


def td_target(transition: Transition, net: DenseNet) -> float:
    """``c + gamma * q(s', a')``; with ``gamma == 0`` the network is not consulted."""
    if transition.gamma == 0.0:
        return transition.c
    x = np.append(transition.s_next, transition.a_next)
    return transition.c + transition.gamma * net.forward(x)


def td_targets(batch: Batch, net: DenseNet) -> np.ndarray:
    return batch.c + batch.gamma * net.forward_batch(batch.next_inputs)


def train_step(net: DenseNet, opt: OptimizerState, buffer: ReplayBuffer, m: int,
               rng: Optional[np.random.Generator] = None) -> float:
    """One minibatch TD(0) update. Returns the mean squared TD error before the update."""
    batch = buffer.sample(m, rng)
    n = len(batch.c)
    # One stacked pass evaluates q(s, a) and the bootstrap q(s', a') at the same parameters.
    # Overflow is reported through TrainingDivergedError below, not as numpy warnings.
    with np.errstate(over="ignore", invalid="ignore"):
        q_all, cache = net.forward_cached(np.concatenate((batch.inputs, batch.next_inputs)))
        q = q_all[:n]
        delta = batch.c + batch.gamma * q_all[n:] - q
        loss = float(delta @ delta) / n
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite TD loss at optimizer step {opt.step_count}")
        acts, _ = cache
        grad = net.backprop(([a[:n] for a in acts], q), delta / n)
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergedError(f"non-finite gradient at optimizer step {opt.step_count}")
    apply_update(net, opt, grad, 1.0)
    return loss


@dataclass
class GvfModel:
    """A trained prediction together with the question it answers."""

    net: DenseNet
    question: Question
    zone: SafetyZoneParams = field(default_factory=SafetyZoneParams)
    feature_names: Tuple[str, ...] = ()
    feature_scaling: dict = field(default_factory=dict)
    output_scale: float = 1.0
    query_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.feature_names = tuple(self.feature_names)
        if self.net.input_width != len(self.feature_names) + 1:
            raise ValueError("network input width must equal feature count + 1 (action)")

    @property
    def kind(self) -> CumulantKind:
        return self.question.kind

    def metadata(self) -> dict:
        return {
            "cumulant": self.question.kind.value,
            "gamma": self.question.gamma,
            "sigma": self.question.sigma,
            "zone": {"tau": self.zone.tau, "d_min": self.zone.d_min, "beta_f": self.zone.beta_f},
            "feature_names": list(self.feature_names),
            "feature_scaling": dict(self.feature_scaling),
            "output_scale": self.output_scale,
        }

    def dumps(self) -> str:
        return network.dumps(self.net, self.metadata())

    @classmethod
    def loads(cls, text) -> "GvfModel":
        net, meta = network.loads(text)
        try:
            return cls(
                net=net,
                question=Question(CumulantKind(meta["cumulant"]), float(meta["gamma"]), float(meta["sigma"])),
                zone=SafetyZoneParams(**meta["zone"]),
                feature_names=tuple(meta["feature_names"]),
                feature_scaling=dict(meta["feature_scaling"]),
                output_scale=float(meta["output_scale"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise network.ModelFormatError(f"bad model metadata: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "GvfModel":
        return cls.loads(Path(path).read_bytes())


def _inputs(model: GvfModel, features, actions: np.ndarray) -> np.ndarray:
    if isinstance(features, FeatureVector):
        obs = features.as_array(model.feature_names)
    else:
        obs = np.asarray(features, dtype=float)
    if obs.shape != (len(model.feature_names),):
        raise ValueError(f"expected {len(model.feature_names)} features, got shape {obs.shape}")
    X = np.empty((len(actions), obs.size + 1))
    X[:, :-1] = obs
    X[:, -1] = actions
    return X


def predict(model: GvfModel, features, action: float) -> float:
    """Prediction for taking ``action`` now and following the target policy after."""
    model.query_count += 1
    return float(model.net.forward_batch(_inputs(model, features, np.array([action])))[0] * model.output_scale)


def predict_actions(model: GvfModel, features, actions: Sequence[float]) -> np.ndarray:
    """One prediction per candidate action; counts as ``len(actions)`` queries."""
    actions = np.asarray(actions, dtype=float)
    model.query_count += len(actions)
    return model.net.forward_batch(_inputs(model, features, actions)) * model.output_scale


class Environment(Protocol):
    question: Question
    feature_names: Tuple[str, ...]
    output_scale: float
    zone: SafetyZoneParams
    feature_scaling: dict

    def reset(self, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        """Start an episode; return the observation and the previous action."""

    def step(self, action: float, rng: np.random.Generator) -> Tuple[np.ndarray, float, float, bool]:
        """Return ``(next_obs, raw_cumulant, continuation, episode_over)``."""


@dataclass
class LearnerConfig:
    hidden_sizes: Tuple[int, ...] = (32, 32)
    output_activation: Optional[str] = None
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    buffer_capacity: int = 100_000
    minibatch_size: int = 32
    sigma: float = 0.05
    reset_probability: float = 0.01
    next_action_mode: str = "target"
    steps: int = 500_000
    log_every: int = 0

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.next_action_mode not in ("target", "behavior"):
            raise ValueError("next_action_mode must be 'target' or 'behavior'")
        if self.minibatch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("minibatch_size and buffer_capacity must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class TrainingLog:
    step: np.ndarray
    td_loss: np.ndarray
    cumulant: np.ndarray
    gamma: np.ndarray
    episode_id: np.ndarray

    COLUMNS = ("step", "td_loss", "cumulant", "gamma", "episode_id")

    @classmethod
    def empty(cls, n: int) -> "TrainingLog":
        return cls(np.arange(n), np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.step)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(self.step.tolist(), self.td_loss.tolist(), self.cumulant.tolist(),
                           self.gamma.tolist(), self.episode_id.tolist()):
                w.writerow(row)

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != cls.COLUMNS:
            raise ValueError(f"{path}: not a training log")
        body = rows[1:]
        col = lambda i, t: np.array([t(r[i]) for r in body])  # noqa: E731
        return cls(col(0, int), col(1, float), col(2, float), col(3, float), col(4, int))


def new_model(question: Question, env: Environment, cfg: LearnerConfig, rng: np.random.Generator) -> GvfModel:
    activation = cfg.output_activation or ("identity" if question.kind is CumulantKind.SPEED else "sigmoid")
    sizes = (len(env.feature_names) + 1, *cfg.hidden_sizes, 1)
    return GvfModel(
        net=DenseNet.initialize(sizes, rng, activation),
        question=question,
        zone=env.zone,
        feature_names=env.feature_names,
        feature_scaling=dict(env.feature_scaling),
        output_scale=env.output_scale,
    )


def train(question: Question, env: Environment, steps: Optional[int] = None,
          cfg: Optional[LearnerConfig] = None, seed: int = 0,
          buffer: Optional[ReplayBuffer] = None) -> Tuple[GvfModel, TrainingLog]:
    """Learn ``question`` from interaction with ``env``; one update per environment step.

    Pass an empty ``buffer`` to inspect the stored transitions afterwards.
    """
    cfg = cfg or LearnerConfig()
    steps = cfg.steps if steps is None else steps
    if env.question != question:
        raise ValueError(f"environment was built for {env.question}, not {question}")
    init_ss, env_ss, policy_ss, replay_ss = np.random.SeedSequence(seed).spawn(4)
    init_rng = np.random.default_rng(init_ss)
    env_rng = np.random.default_rng(env_ss)
    pol_rng = np.random.default_rng(policy_ss)
    replay_rng = np.random.default_rng(replay_ss)

    model = new_model(question, env, cfg, init_rng)
    net = model.net
    opt = OptimizerState.for_net(net, learning_rate=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
                                 epsilon=cfg.epsilon, mode=cfg.optimizer)
    if buffer is None:
        buffer = ReplayBuffer(cfg.buffer_capacity, len(env.feature_names))
    elif buffer.obs_dim != len(env.feature_names):
        raise ValueError("replay buffer width does not match the environment's features")
    target = TargetPolicy(question.sigma)
    behavior = BehaviorPolicy(cfg.sigma, cfg.reset_probability)
    tlog = TrainingLog.empty(steps)
    inv_scale = 1.0 / env.output_scale
    on_policy = cfg.next_action_mode == "behavior"

    obs, last = env.reset(env_rng)
    action = behavior.sample(last, pol_rng)
    episode = 0
    for t in range(steps):
        obs_next, c_raw, gamma, done = env.step(action, env_rng)
        c = scale_cumulant(c_raw * inv_scale, gamma)
        next_action = behavior.sample(action, pol_rng)
        a_prime = next_action if (on_policy and not done) else target.sample(action, pol_rng)
        buffer.add(obs, action, c, gamma, obs_next, a_prime)
        loss = train_step(net, opt, buffer, cfg.minibatch_size, replay_rng)
        tlog.td_loss[t] = loss
        tlog.cumulant[t] = c
        tlog.gamma[t] = gamma
        tlog.episode_id[t] = episode
        if cfg.log_every and (t + 1) % cfg.log_every == 0:
            recent = tlog.td_loss[max(0, t + 1 - cfg.log_every): t + 1]
            log.info("step %d  mean td loss %.3g  episodes %d", t + 1, recent.mean(), episode + 1)
        if done:
            episode += 1
            obs, last = env.reset(env_rng)
            action = behavior.sample(last, pol_rng)
        else:
            obs = obs_next
            action = next_action
    return model, tlog
