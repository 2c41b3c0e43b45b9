import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gvf_acc.cumulants import CumulantKind
from gvf_acc.evaluation import (
    EXPORT_COLUMNS,
    SWEEP_DRIVERS,
    ChainEnv,
    Metrics,
    ModelMismatchError,
    ModelSet,
    ScenarioResult,
    SweepResult,
    build_tabular_oracle,
    chain_transition_matrix,
    compute_metrics,
    crossing_time,
    horizon_sweep,
    mc_return,
    on_policy_returns,
    read_result_csv,
    rear_warning_lead_time,
    run_scenario,
)
from gvf_acc.learner import LearnerConfig, Question, train
from gvf_acc.scenarios import TrafficEnv, get_scenario

from helpers import constant_model

DT = 0.05


# ------------------------------------------------------------------ return oracle

def test_mc_return_geometric_closed_form():
    g = 0.95
    assert mc_return([(1 - g, g)] * 300) == pytest.approx(1 - g ** 300, abs=1e-12)
    assert mc_return([(1 - g, g)] * 300) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("k", [1, 5, 40])
def test_mc_return_termination(k):
    g = 0.95
    rollout = [(1 - g, g)] * (k - 1) + [(1 - g, 0.0)]
    assert mc_return(rollout) == pytest.approx(1 - g ** k, abs=1e-12)


def test_mc_return_zero_and_too_short():
    assert mc_return([(0.0, 0.95)] * 400) == 0.0
    with pytest.raises(ValueError, match="too short"):
        mc_return([(0.05, 0.95)] * 10)


def test_mc_return_ignores_cumulants_after_termination():
    assert mc_return([(0.5, 0.0), (123.0, 0.9)]) == 0.5


@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.0, 0.9)), min_size=1, max_size=60))
def test_mc_return_is_linear(steps):
    tail = [(0.0, 0.0)]
    a = [(c1, g) for c1, _, g in steps] + tail
    b = [(c2, g) for _, c2, g in steps] + tail
    ab = [(c1 + c2, g) for c1, c2, g in steps] + tail
    assert mc_return(ab) == pytest.approx(mc_return(a) + mc_return(b), abs=1e-9)


# ------------------------------------------------------------------ tabular oracle

def test_oracle_two_state_chain():
    g = 0.9
    np.testing.assert_allclose(build_tabular_oracle(2, g, [0.0, 1.0]), [g, 1.0])


def test_oracle_zero_and_constant():
    np.testing.assert_array_equal(build_tabular_oracle(5, 0.9, np.zeros(5)), np.zeros(5))
    g = 0.95
    np.testing.assert_allclose(build_tabular_oracle(5, g, [1 - g] * 5, terminal=False), np.ones(5))


@given(st.integers(2, 8), st.floats(0.0, 0.99), st.booleans(), st.data())
def test_oracle_matches_linear_solve(n, g, terminal, data):
    c = np.array(data.draw(st.lists(st.floats(-1, 1), min_size=n, max_size=n)))
    P = chain_transition_matrix(n, terminal)
    direct = np.linalg.solve(np.eye(n) - g * P, c)
    np.testing.assert_allclose(build_tabular_oracle(n, g, c, terminal), direct, atol=1e-9)


def test_oracle_validation():
    with pytest.raises(ValueError):
        build_tabular_oracle(1, 0.9, [1.0])
    with pytest.raises(ValueError):
        build_tabular_oracle(3, 0.9, [1.0, 2.0])


def test_chain_env_walks_and_terminates():
    q = Question(CumulantKind.FRONT_SAFETY, 0.9)
    env = ChainEnv(q, [1, 0, 1])
    obs, _ = env.reset(None)
    np.testing.assert_array_equal(obs, [1, 0, 0])
    seen = [env.step(0.0, None) for _ in range(3)]
    assert [s[1] for s in seen] == [1, 0, 1]
    assert [s[2] for s in seen] == [0.9, 0.9, 0.0]
    assert seen[-1][3] and not np.any(seen[-1][0])
    np.testing.assert_allclose(env.scaled_cumulants(), [0.1, 0.0, 1.0])


def test_myopic_chain_tracks_next_cumulant():
    q = Question(CumulantKind.FRONT_SAFETY, 0.0)
    raw = [1, 1, 1, 0, 0]
    env = ChainEnv(q, raw)
    cfg = LearnerConfig(hidden_sizes=(), output_activation="identity", optimizer="sgd", learning_rate=0.1,
                        minibatch_size=8)
    model, _ = train(q, env, 5000, cfg, seed=0)
    preds = [model.net.forward(np.append(np.eye(5)[i], 0.0)) for i in range(5)]
    np.testing.assert_allclose(preds, raw, atol=0.05)


# ------------------------------------------------------------------ scenario runs

def _models():
    return ModelSet(front=constant_model("front", 0.95), rear=constant_model("rear", 0.9),
                    speed=constant_model("speed", 20.0))


def test_baseline_emergency_stop():
    res = run_scenario(get_scenario("emergency_stop"), "baseline")
    m = res.metrics
    assert not m.collided and m.final_gap_at_rest is not None and m.final_gap_at_rest >= 0
    assert m.min_front_gap <= m.final_gap_at_rest
    assert len(res) == round(30.0 / DT) + 1 and not res.truncated


def test_zero_duration_is_a_single_record():
    res = run_scenario(get_scenario("emergency_stop", {"duration": 0.0}), "baseline")
    assert len(res) == 1 and res.metrics.empty


def test_controller_model_requirements():
    with pytest.raises(ModelMismatchError):
        run_scenario(get_scenario("free_drive"), "fuzzy", ModelSet(front=constant_model("front", 0.9)))
    with pytest.raises(ModelMismatchError):
        run_scenario(get_scenario("free_drive"), "rule_with_speed",
                     ModelSet(front=constant_model("speed", 3.0), speed=constant_model("speed", 3.0)))
    with pytest.raises(ValueError):
        run_scenario(get_scenario("free_drive"), "autopilot")


@pytest.mark.parametrize("controller", ["fuzzy", "rule_with_speed", "rule_without_speed", "baseline"])
def test_rear_model_is_never_queried_for_control(controller):
    spec = get_scenario("rear_approach", {"duration": 2.0})
    res = run_scenario(spec, controller, _models())
    assert res.controller_queries["rear"] == 0
    assert np.isfinite(res.columns["pred_rear"][:-1]).all()


def test_fuzzy_query_budget():
    spec = get_scenario("emergency_stop", {"duration": 1.0})
    res = run_scenario(spec, "fuzzy", _models())
    assert res.controller_queries["front"] == 21 * 20


def test_runs_are_deterministic_per_seed():
    spec = get_scenario("follow_and_stop", {"duration": 5.0})
    a = run_scenario(spec, "rule_without_speed", _models(), seed=2)
    b = run_scenario(spec, "rule_without_speed", _models(), seed=2)
    c = run_scenario(spec, "rule_without_speed", _models(), seed=3)
    assert a.to_csv() == b.to_csv() and a.metrics == b.metrics
    assert a.to_csv() != c.to_csv()


def test_export_round_trip(tmp_path):
    res = run_scenario(get_scenario("follow_and_stop", {"duration": 3.0}), "rule_with_speed", _models())
    res.write(tmp_path / "r.csv", tmp_path / "m.json")
    cols = read_result_csv(tmp_path / "r.csv")
    assert tuple(cols) == EXPORT_COLUMNS
    for name in EXPORT_COLUMNS:
        np.testing.assert_array_equal(cols[name], res.columns[name])
    assert Metrics.from_json((tmp_path / "m.json").read_text()) == res.metrics


def _synthetic(t_warn, t_drop, n=100):
    t = np.arange(n) * DT
    cols = {name: np.zeros(n) for name in EXPORT_COLUMNS}
    cols["t"] = t
    cols["pred_rear"] = np.where(t >= t_warn - 1e-9, 0.2, 0.9)
    cols["c_rear"] = np.where(t >= t_drop - 1e-9, 0.0, 1.0) if t_drop is not None else np.ones(n)
    cols["pred_front"] = cols["pred_rear"]
    return ScenarioResult("x", "baseline", DT, cols, None, False, False)


def test_rear_warning_examples():
    assert rear_warning_lead_time(_synthetic(2.0, 2.5)) == pytest.approx(0.5)
    assert rear_warning_lead_time(_synthetic(2.0, None)) is None
    assert rear_warning_lead_time(_synthetic(3.0, 2.5)) == pytest.approx(-0.5)


def test_crossing_time_needs_a_downward_crossing():
    assert crossing_time(_synthetic(1.0, None)) == pytest.approx(1.0)
    res = _synthetic(0.0, None)
    assert crossing_time(res) is None


def test_metrics_are_pure_functions_of_the_trajectory():
    res = run_scenario(get_scenario("follow_and_stop"), "baseline")
    assert compute_metrics(res, get_scenario("follow_and_stop").v_target) == res.metrics
    assert res.metrics.max_decel <= 6.0 + 1e-9


# ------------------------------------------------------------------ horizon sweep

def test_sweep_table_and_ordering():
    sw = SweepResult({}, [(0.95, 5.0), (0.975, 4.0), (0.983, 4.0)])
    assert sw.ordered()
    assert SweepResult({}, [(0.95, 4.0), (0.975, 5.0)]).ordered() is False
    assert SweepResult({}, [(0.95, None), (0.975, 3.0)]).ordered()
    assert sw.table_csv().splitlines() == ["gamma,crossing_time", "0.95,5.0", "0.975,4.0", "0.983,4.0"]


def test_single_gamma_sweep_and_missing_model():
    spec = get_scenario("emergency_stop", {"duration": 2.0})
    sw = horizon_sweep(spec, {0.95: constant_model("front", 0.9)}, [0.95])
    assert len(sw.table) == 1 and sw.results[0.95].controller == "cruise"
    with pytest.raises(KeyError):
        horizon_sweep(spec, {}, [0.95])
    with pytest.raises(ValueError):
        horizon_sweep(spec, {0.95: constant_model("front", 0.9)}, [0.95], driver="nobody")
    assert SWEEP_DRIVERS[0] == "cruise"


def test_cruise_probe_holds_speed():
    spec = get_scenario("emergency_stop", {"duration": 3.0})
    res = horizon_sweep(spec, {0.95: constant_model("front", 0.9)}, [0.95]).results[0.95]
    np.testing.assert_allclose(res.columns["v_ego"], spec.ego_speed)


def test_myopic_model_crosses_with_the_cumulant():
    q = Question(CumulantKind.FRONT_SAFETY, 0.0)
    model, _ = train(q, TrafficEnv(q), 100_000, LearnerConfig(), seed=0)
    spec = get_scenario("emergency_stop")
    for seed in (None, 1):
        res = horizon_sweep(spec, {0.0: model}, [0.0], seed=seed).results[0.0]
        drop = res.columns["t"][np.flatnonzero(res.columns["c_front"] == 0)[0]]
        assert abs(crossing_time(res) - drop) <= 2 * DT + 1e-9


# ------------------------------------------------------------------ held-out scoring

def test_on_policy_returns_shapes_and_range():
    model = constant_model("front", 0.7)
    q = Question(CumulantKind.FRONT_SAFETY, 0.9)
    preds, rets = on_policy_returns(model, TrafficEnv(q), 5, rollouts_per_point=2, seed=0)
    np.testing.assert_allclose(preds, 0.7)
    assert rets.shape == (5,) and np.all((rets >= 0) & (rets <= 1))
    again = on_policy_returns(model, TrafficEnv(q), 5, rollouts_per_point=2, seed=0)[1]
    np.testing.assert_array_equal(rets, again)


def test_nan_free_metrics_json():
    res = run_scenario(get_scenario("free_drive", {"duration": 1.0}), "baseline")
    m = res.metrics
    assert m.min_front_gap is None and m.final_gap_at_rest is None
    assert not math.isnan(m.speed_rmse_to_target)
    assert Metrics.from_json(m.to_json()) == m
