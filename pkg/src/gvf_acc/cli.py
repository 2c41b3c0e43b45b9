"""Command-line entry point: ``gvf-acc {train,eval,sweep,grad-check,export}``.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 model or artifact mismatch, 5 failed self-check.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import network
from .config import ConfigError, RunConfig, default_config_text, dump_config, load_config, parse_override
from .cumulants import CumulantKind
from .evaluation import CONTROLLERS, SWEEP_DRIVERS, ModelMismatchError, ModelSet, horizon_sweep, run_scenario
from .learner import GvfModel, Question, TrainingDivergedError, train
from .network import ModelFormatError
from .scenarios import UnknownScenarioError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4
EXIT_CHECK = 5

QUESTIONS = {"front": CumulantKind.FRONT_SAFETY, "rear": CumulantKind.REAR_SAFETY, "speed": CumulantKind.SPEED}


class MismatchError(Exception):
    """A model file is missing or does not fit the run."""


def _gamma_tag(gamma: float) -> str:
    return f"g{gamma!r}"


def _run_dir(cfg: RunConfig, explicit: Optional[str], name: str) -> Path:
    path = Path(explicit) if explicit else Path(cfg.output_dir) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def train_run_dir(cfg: RunConfig, question: str, gamma: float) -> Path:
    """Default location of a training run, also where ``sweep`` looks for models."""
    return Path(cfg.output_dir) / f"train-{question}-{_gamma_tag(gamma)}-s{cfg.seed}"


def _load_cfg(args) -> RunConfig:
    overrides = dict(parse_override(s) for s in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    return load_config(args.config, overrides)


def _train_one(cfg: RunConfig, question: str, gamma: float, steps: Optional[int],
               model_path: Optional[Path], run_dir: Path) -> GvfModel:
    q = Question(QUESTIONS[question], gamma, cfg.learner.sigma)
    env = cfg.traffic(q)
    model, tlog = train(q, env, steps, cfg.learner, seed=cfg.seed)
    model_path = model_path or run_dir / "model.json"
    model_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(model_path)
    tlog.write_csv(run_dir / "train_log.csv")
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    tail = tlog.td_loss[-1000:]
    final = float(tail.mean()) if len(tail) else float("nan")
    print(f"trained {question} gamma={gamma} steps={len(tlog)} final_td_loss={final:.6g} model={model_path}")
    return model


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    gamma = cfg.training.gamma if args.gamma is None else args.gamma
    run_dir = _run_dir(cfg, args.run_dir, train_run_dir(cfg, args.question, gamma).name)
    _train_one(cfg, args.question, gamma, args.steps, Path(args.out) if args.out else None, run_dir)
    return EXIT_OK


def _load_model(path) -> GvfModel:
    try:
        return GvfModel.load(path)
    except OSError as exc:
        raise MismatchError(f"cannot read model {path}: {exc.strerror or exc}") from exc
    except ModelFormatError as exc:
        raise MismatchError(f"{path}: {exc}") from exc


def check_model(model: GvfModel, cfg: RunConfig, zone, source: str) -> None:
    """Refuse models trained with different feature scaling or, for safety models, a different zone."""
    if model.feature_scaling != cfg.sim.feature_scaling():
        raise MismatchError(f"{source}: feature scaling {model.feature_scaling} differs from "
                            f"the configured {cfg.sim.feature_scaling()}")
    if model.kind is not CumulantKind.SPEED and model.zone != zone:
        raise MismatchError(f"{source}: trained for safety zone {model.zone}, scenario uses {zone}")


def assign_models(models: Dict[str, GvfModel]) -> ModelSet:
    slots: Dict[str, GvfModel] = {}
    names = {CumulantKind.FRONT_SAFETY: "front", CumulantKind.REAR_SAFETY: "rear", CumulantKind.SPEED: "speed"}
    for source, m in models.items():
        slot = names[m.kind]
        if slot in slots:
            raise MismatchError(f"two {slot} models given ({source})")
        slots[slot] = m
    return ModelSet(**slots)


def _write_result(result, run_dir: Path, stem: str = "trajectory") -> None:
    result.write(run_dir / f"{stem}.csv", run_dir / f"{stem}_metrics.json")


def _summary(result) -> str:
    m = result.metrics
    gap = "none" if m.min_front_gap is None else f"{m.min_front_gap:.3f}"
    return (f"{result.scenario} {result.controller}: collided={str(m.collided).lower()} "
            f"min_front_gap={gap} max_decel={m.max_decel:.3f}")


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    spec = cfg.scenario(args.scenario)
    loaded = {p: _load_model(p) for p in (args.models or [])}
    for source, m in loaded.items():
        check_model(m, cfg, spec.zone, source)
    models = assign_models(loaded)
    seed = cfg.evaluation.scenario_seed if args.scenario_seed is None else args.scenario_seed
    result = run_scenario(spec, args.controller, models, cfg.sim, cfg.controller_config(args.controller, spec),
                          seed=seed, warning_threshold=cfg.evaluation.warning_threshold)
    name = f"eval-{args.scenario}-{args.controller}" + ("" if seed is None else f"-s{seed}")
    run_dir = _run_dir(cfg, args.run_dir, name)
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    _write_result(result, run_dir)
    print(_summary(result))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    gammas = [float(g) for g in args.gammas] if args.gammas else list(cfg.training.sweep_gammas)
    spec = cfg.scenario(args.scenario)
    front: Dict[float, GvfModel] = {}
    for g in gammas:
        path = train_run_dir(cfg, "front", g) / "model.json"
        if not path.exists():
            if not args.train_missing:
                raise MismatchError(f"no front model for gamma={g} at {path} (use --train-missing)")
            _train_one(cfg, "front", g, args.steps, path, _run_dir(cfg, None, path.parent.name))
        front[g] = _load_model(path)
        check_model(front[g], cfg, spec.zone, str(path))
        if front[g].kind is not CumulantKind.FRONT_SAFETY or front[g].question.gamma != g:
            raise MismatchError(f"{path}: expected a front model with gamma={g}, found "
                                f"{front[g].kind.value} gamma={front[g].question.gamma}")
    support = assign_models({p: _load_model(p) for p in (args.models or [])})
    if support.front is not None:
        raise MismatchError("front models come from the sweep; pass only speed/rear models with --models")
    for m in (support.rear, support.speed):
        if m is not None:
            check_model(m, cfg, spec.zone, "support model")
    seed = cfg.evaluation.scenario_seed if args.scenario_seed is None else args.scenario_seed
    driver_cfg = None if args.driver == "cruise" else cfg.controller_config(args.driver, spec)
    result = horizon_sweep(spec, front, gammas, args.driver, support, cfg.sim,
                           cfg.evaluation.warning_threshold, seed=seed, controller_cfg=driver_cfg)
    run_dir = _run_dir(cfg, args.run_dir, f"sweep-{args.scenario}-{args.driver}")
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    (run_dir / "crossing_times.csv").write_text(result.table_csv())
    for g, res in result.results.items():
        _write_result(res, run_dir, f"trajectory_{_gamma_tag(g)}")
    print("gamma  crossing_time_s")
    for g, t in result.table:
        print(f"{g:<6} {'never' if t is None else f'{t:.2f}'}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.trials < 0:
        raise ConfigError("--trials must be >= 0")
    report = network.gradient_check(args.trials, args.seed)
    if args.trials == 0:
        print("grad-check: 0 trials run (vacuous pass)")
        return EXIT_OK
    print(f"grad-check: {report.trials} trials, max relative error {report.max_relative_error:.3e} "
          f"(tolerance {report.tolerance:g})")
    if not report.passed:
        print(f"grad-check FAILED: worst mismatch in layer {report.worst_layer}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def prediction_surface(model: GvfModel, features: Dict[str, float], sweep: str, lo: float, hi: float,
                       n: int, actions: Sequence[float]) -> List[List[float]]:
    """Rows ``[sweep_value, action, prediction]`` over a grid of one scaled feature and the action."""
    if sweep not in model.feature_names:
        raise ConfigError(f"model has no feature {sweep!r}; features: {', '.join(model.feature_names)}")
    unknown = set(features) - set(model.feature_names)
    if unknown:
        raise ConfigError(f"unknown feature(s) {', '.join(sorted(unknown))}")
    base = np.array([features.get(f, 0.0) for f in model.feature_names])
    idx = model.feature_names.index(sweep)
    rows = []
    for value in np.linspace(lo, hi, n):
        x = base.copy()
        x[idx] = value
        preds = model.net.forward_batch(np.column_stack([np.tile(x, (len(actions), 1)), actions]))
        for a, p in zip(actions, preds * model.output_scale):
            rows.append([float(value), float(a), float(p)])
    return rows


def cmd_export(args) -> int:
    if args.default_config:
        text = default_config_text()
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if not args.model:
        raise ConfigError("export needs --model (or --default-config)")
    model = _load_model(args.model)
    fixed = dict(parse_override(s) for s in (args.feature or []))
    sweep = args.sweep or model.feature_names[0]
    actions = np.linspace(-1.0, 1.0, args.n_actions)
    rows = prediction_surface(model, fixed, sweep, -1.0, 1.0, args.n_points, actions)
    lines = [f"{sweep},action,prediction"] + [",".join(repr(v) for v in r) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gvf-acc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML run config (defaults when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. learner.learning_rate=3e-4 (repeatable)")
        p.add_argument("--output-dir", help="root directory for run outputs (else config or $GVF_ACC_OUT)")
        p.add_argument("--run-dir", help="exact directory for this run's outputs")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (overrides config)")

    p = sub.add_parser("train", help="learn one prediction from randomized traffic")
    common(p)
    p.add_argument("--question", required=True, choices=sorted(QUESTIONS))
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", type=int, help="environment steps (one update each)")
    p.add_argument("--out", help="model file path (default: <run dir>/model.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run one controller on one scenario")
    common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--controller", required=True, choices=CONTROLLERS)
    p.add_argument("--models", nargs="*", help="model files; slots are assigned from their metadata")
    p.add_argument("--scenario-seed", type=int, help="perturb the preset's initial conditions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="front-safety 0.5-crossing time across discounts")
    common(p)
    p.add_argument("--gammas", nargs="+", type=float)
    p.add_argument("--scenario", default="emergency_stop")
    p.add_argument("--driver", default="cruise", choices=SWEEP_DRIVERS,
                   help="who drives during the sweep; cruise holds speed and ignores the lead")
    p.add_argument("--models", nargs="*", help="speed/rear models needed by a learned driver")
    p.add_argument("--train-missing", action="store_true", help="train front models that are not on disk")
    p.add_argument("--steps", type=int, help="training steps for --train-missing")
    p.add_argument("--scenario-seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", help="backprop versus finite differences on random nets")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export", help="plot-ready prediction grid from a model, or the default config")
    p.add_argument("--model")
    p.add_argument("--sweep", help="feature varied over its scaled range [-1, 1] (default: first)")
    p.add_argument("--feature", action="append", metavar="NAME=VALUE", help="fix a scaled feature (default 0)")
    p.add_argument("--n-points", type=int, default=41)
    p.add_argument("--n-actions", type=int, default=21)
    p.add_argument("--default-config", action="store_true", help="write the default YAML config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnknownScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MismatchError, ModelMismatchError) as exc:
        print(f"model mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
