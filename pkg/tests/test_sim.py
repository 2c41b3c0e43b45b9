import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gvf_acc.scenarios import get_scenario, reset_scenario
from gvf_acc.sim import (
    SimConfig,
    VehicleState,
    WorldState,
    command_to_accel,
    engine_curve,
    extract_features,
    front_gap,
    initial_state,
    rear_gap,
    sensed_gap,
    step,
)

CFG = SimConfig()


def _command_for(accel: float, speed: float) -> float:
    return accel / (CFG.a_max_throttle * engine_curve(speed, CFG))


def test_throttle_step_matches_hand_euler():
    ego = VehicleState(0.0, 10.0)
    cmd = _command_for(2.0, 10.0)
    out = step(initial_state(ego), cmd, 0.0, 0.0, CFG)
    assert out.next_state.ego.speed == pytest.approx(10.1, abs=1e-12)
    assert out.next_state.ego.position == pytest.approx(0.505, abs=1e-12)


def test_full_brake_clamps_at_zero():
    out = step(initial_state(VehicleState(0.0, 0.1)), -1.0, 0.0, 0.0, CFG)
    assert command_to_accel(-1.0, 0.1, CFG) == -6.0
    assert out.next_state.ego.speed == 0.0


def test_overlap_is_a_front_collision():
    lead = VehicleState(50.0, 0.0, length=4.0)
    ego = VehicleState(46.5, 10.0)  # moves 0.5 m to x=47: gap 50 - 4 - 47 = -1
    out = step(initial_state(ego, lead), 0.0, 0.0, 0.0, CFG)
    assert out.next_state.ego.position == pytest.approx(47.0)
    assert front_gap(out.next_state) <= 0
    assert out.front_collision and not out.rear_collision


def test_engine_curve_interpolates_and_clamps():
    assert engine_curve(0.0, CFG) == 1.0
    assert engine_curve(7.5, CFG) == pytest.approx(0.85)
    assert engine_curve(30.0, CFG) == pytest.approx(0.4)
    assert engine_curve(100.0, CFG) == pytest.approx(0.4)


@pytest.mark.parametrize("bad", [math.nan, math.inf, 1.5, -1.01])
def test_step_rejects_bad_action(bad):
    with pytest.raises(ValueError):
        step(initial_state(VehicleState(0.0, 1.0)), bad, 0.0, 0.0, CFG)


def test_step_rejects_non_finite_script():
    s = initial_state(VehicleState(0.0, 1.0), VehicleState(50.0, 0.0))
    with pytest.raises(ValueError):
        step(s, 0.0, math.nan, 0.0, CFG)
    with pytest.raises(ValueError):
        step(s, 0.0, 0.0, math.inf, CFG)


def test_invalid_config_and_vehicle():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(engine_curve_knots=((0.0, 1.0), (0.0, 0.5)))
    with pytest.raises(ValueError):
        VehicleState(0.0, -1.0)


def test_presets_reset_to_their_speeds():
    es = reset_scenario(get_scenario("emergency_stop"), CFG)
    assert es.ego.speed == pytest.approx(27.78, abs=0.01)
    assert es.lead.speed == 0.0 and front_gap(es) > 200
    fs = reset_scenario(get_scenario("follow_and_stop"), CFG)
    assert fs.lead.speed == pytest.approx(22.22, abs=0.01)


@pytest.mark.parametrize("name", ["emergency_stop", "follow_and_stop", "rear_approach", "free_drive",
                                  "robot_approach"])
def test_reset_contract(name):
    s = reset_scenario(get_scenario(name), CFG)
    f = extract_features(s, CFG)
    assert s.last_action == 0.0
    assert f.d_gap == 0.0 and f.d_gap_prev == 0.0
    assert f.d_rear_gap == 0.0 and f.d_rear_gap_prev == 0.0


def test_features_saturate_without_lead():
    f = extract_features(initial_state(VehicleState(0.0, 5.0)), CFG)
    assert f.front_gap == 1.0 and f.rear_gap == 1.0


def test_feature_gap_scaling():
    s = initial_state(VehicleState(0.0, 20.0), VehicleState(100.0 + 4.5, 0.0))
    f = extract_features(s, CFG)
    assert f.front_gap == pytest.approx(0.0)
    assert f.ego_speed == pytest.approx(0.0)
    assert extract_features(s, CFG) == f


# ------------------------------------------------------------------ properties

speeds = st.floats(0.0, 40.0)
actions = st.floats(-1.0, 1.0)
accels = st.floats(-8.0, 4.0)


@st.composite
def worlds(draw):
    ego = VehicleState(0.0, draw(speeds))
    lead = rear = None
    if draw(st.booleans()):
        lead = VehicleState(draw(st.floats(0.5, 300.0)) + 4.5, draw(speeds))
    if draw(st.booleans()):
        rear = VehicleState(-4.5 - draw(st.floats(0.5, 300.0)), draw(speeds))
    return initial_state(ego, lead, rear, CFG, last_action=draw(actions))


@given(worlds(), st.lists(st.tuples(actions, accels, accels), min_size=1, max_size=30))
def test_kinematics_and_speed_bounds(state, controls):
    for a, la, ra in controls:
        out = step(state, a, la, ra, CFG)
        nxt = out.next_state
        for before, after in ((state.ego, nxt.ego), (state.lead, nxt.lead), (state.rear, nxt.rear)):
            if before is None:
                assert after is None
                continue
            assert after.position == before.position + after.speed * CFG.dt
            assert 0.0 <= after.speed <= CFG.v_max
        state = nxt


@given(worlds(), actions, accels, accels)
def test_step_is_deterministic(state, a, la, ra):
    assert step(state, a, la, ra, CFG) == step(state, a, la, ra, CFG)


@given(worlds(), actions, accels, accels)
def test_collision_flags_are_coherent(state, a, la, ra):
    out = step(state, a, la, ra, CFG)
    nxt = out.next_state
    assert out.front_collision == (nxt.lead is not None and front_gap(nxt) <= 0)
    assert out.rear_collision == (nxt.rear is not None and rear_gap(nxt) <= 0)


@given(worlds(), st.lists(st.tuples(actions, accels, accels), min_size=2, max_size=10))
def test_gap_history_shift(state, controls):
    prev_d = extract_features(state, CFG).d_gap
    for a, la, ra in controls:
        out = step(state, a, la, ra, CFG)
        f = out.features
        old = sensed_gap(front_gap(state), CFG)
        new = sensed_gap(front_gap(out.next_state), CFG)
        assert f.d_gap * CFG.gap_change_scale == pytest.approx(new - old, abs=1e-9)
        assert f.d_gap_prev == pytest.approx(prev_d, abs=1e-12)
        assert out.next_state.prev_front_gap == old
        assert out.next_state.prev_prev_front_gap == state.prev_front_gap
        prev_d = f.d_gap
        state = out.next_state


@given(worlds())
def test_features_are_bounded_and_pure(state):
    f = extract_features(state, CFG)
    arr = f.as_array()
    assert np.all(np.isfinite(arr))
    assert -1.0 <= f.front_gap <= 1.0 and -1.0 <= f.rear_gap <= 1.0
    assert extract_features(state, CFG) == f


def test_world_state_defaults():
    s = WorldState(VehicleState(0.0, 1.0))
    assert s.lead is None and s.time_step_index == 0
