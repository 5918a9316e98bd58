import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import discounted_return_loop
from twinforge.env import (
    ACT_DIM,
    DEFAULT_START_Q,
    OBS_DIM,
    TRACE_COLUMNS,
    EnvConfig,
    InvalidStart,
    NotReset,
    Observation,
    ReachEnv,
    TaskEnv,
    clip_action,
    episode_return,
    reward_action,
    reward_goal,
    reward_obstacle,
)
from twinforge.kinematics import forward_kinematics, reference_arm
from twinforge.world import TABLE_Z, BoxObstacle, ClosestPair, Scene, SceneDistribution, scene_closest

ARM = reference_arm()
CFG = EnvConfig()
START = np.array(DEFAULT_START_Q)
EMPTY = Scene(goal_pos=(0.35, -0.15, TABLE_Z), obstacles=(), workspace_bounds=SceneDistribution().bounds)
small = st.floats(-0.1, 0.1, allow_nan=False)


def fresh(scene=EMPTY, cfg=CFG, **kw):
    env = ReachEnv(ARM, cfg, **kw)
    return env, env.reset(scene, START)


# reward terms ----------------------------------------------------------------

def test_reward_goal_values():
    assert reward_goal(0.2, 0.2) == 0.0
    assert reward_goal(0.30, 0.25) == pytest.approx(0.05, abs=1e-15)


def test_reward_action_values():
    assert reward_action(np.zeros(3)) == 0.0
    assert reward_action([0.03, 0.0, 0.04]) == pytest.approx(-0.05, abs=1e-15)


@given(st.tuples(small, small, small))
def test_reward_action_is_symmetric(a):
    a = np.array(a)
    assert reward_action(a) == reward_action(-a)


def test_reward_obstacle_boundary():
    d = CFG.d_thre
    assert reward_obstacle(d, d) == 0.0
    assert reward_obstacle(d - 1e-6, d) == -1.0
    assert reward_obstacle(10.0, d) == 0.0
    pair = ClosestPair(np.zeros(3), np.zeros(3), d)
    assert reward_obstacle(pair, d) == 0.0


def test_episode_return_closed_forms():
    assert episode_return([3.0, 5.0, 7.0], 0.0) == 3.0
    T = 20
    assert episode_return([1.0] * T, 0.5) == pytest.approx(2 * (1 - 0.5**T), abs=1e-15)
    assert episode_return([1.0] * 2000, 0.5) == pytest.approx(2.0, abs=1e-15)


@given(st.lists(st.floats(-10, 10, allow_nan=False), max_size=60), st.floats(0, 1))
def test_episode_return_matches_loop(rewards, gamma):
    assert episode_return(rewards, gamma) == pytest.approx(discounted_return_loop(rewards, gamma), abs=1e-12)


@given(st.tuples(small, small, small))
def test_clip_action_bounds(a):
    c = clip_action(a, CFG.a_max)
    assert c.shape == (ACT_DIM,)
    assert np.all(np.abs(c) <= CFG.a_max)


# reset ----------------------------------------------------------------------

def test_reset_contract():
    env, obs = fresh()
    assert obs.t == 0.0
    assert np.array_equal(obs.vel_tcp, np.zeros(3))
    assert np.allclose(obs.pos_tcp, forward_kinematics(ARM, START).position)
    # no obstacles: h = w = 0 and both witness points sit at the TCP
    assert obs.h == 0.0 and obs.w == 0.0
    assert np.array_equal(obs.pos_A, obs.pos_tcp) and np.array_equal(obs.pos_B, obs.pos_tcp)


def test_reset_inside_obstacle_raises():
    tcp = forward_kinematics(ARM, START).position
    box = BoxObstacle((tcp[0], tcp[1], 0.15), (0.05, 0.05, 0.15))
    scene = Scene(goal_pos=(0.35, -0.15, TABLE_Z), obstacles=(box,), workspace_bounds=EMPTY.workspace_bounds)
    with pytest.raises(InvalidStart):
        ReachEnv(ARM).reset(scene, START)


def test_reset_witness_points_match_world_query(reference_scene):
    env, obs = fresh(reference_scene)
    pair = scene_closest(ARM, START, reference_scene)
    assert np.array_equal(obs.pos_A, pair.pos_A)
    assert np.array_equal(obs.pos_B, pair.pos_B)
    box = reference_scene.obstacles[0]
    assert (obs.h, obs.w) == (box.height, box.width)


def test_step_before_reset_raises():
    with pytest.raises(NotReset):
        ReachEnv(ARM).step(np.zeros(3))


def test_step_after_done_raises():
    env, _ = fresh(cfg=EnvConfig(horizon=1))
    env.step(np.zeros(3))
    with pytest.raises(NotReset):
        env.step(np.zeros(3))


# step -----------------------------------------------------------------------

def test_step_reward_with_default_weights():
    # goal straight below the start TCP, far beyond d_thre from everything
    tcp = forward_kinematics(ARM, START).position
    scene = Scene(goal_pos=(tcp[0], tcp[1], TABLE_Z), obstacles=(), workspace_bounds=EMPTY.workspace_bounds)
    env, _ = fresh(scene)
    out = env.step([0.0, 0.0, -0.05])
    r_g, r_a, r_o = out.reward_terms
    assert (r_a, r_o) == (-0.05, 0.0)
    assert out.reward == pytest.approx(r_g - 0.005, abs=1e-15)
    # IK stops within 1e-4 of the commanded target
    assert out.reward == pytest.approx(0.045, abs=1e-4)
    assert 1.0 * 0.05 + 0.1 * -0.05 + 1.0 * 0.0 == pytest.approx(0.045, abs=1e-15)


def test_zero_action_far_from_everything():
    env, _ = fresh()
    out = env.step(np.zeros(3))
    assert out.reward == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(out.observation.vel_tcp, 0.0, atol=1e-9)


def test_unreachable_target_leaves_arm_in_place():
    env, obs = fresh()
    for _ in range(30):  # drive far outside the reach envelope along +x
        out = env.step([0.05, 0.0, 0.05])
        if out.ik_failed:
            break
    assert out.ik_failed
    assert np.array_equal(out.q, env.q)
    assert not out.terminated


def test_goal_reached_terminates_with_flag_task():
    tcp = forward_kinematics(ARM, START).position
    goal = tcp - [0.0, 0.0, 0.02]
    scene = Scene(goal_pos=goal, obstacles=(), workspace_bounds=EMPTY.workspace_bounds)
    env, _ = fresh(scene)
    out = env.step([0.0, 0.0, -0.02])
    assert out.terminated and not out.truncated
    assert out.flags == (1, 1)
    assert out.distance_to_goal <= CFG.goal_radius


def test_collision_terminates_and_forces_penalty():
    tcp = forward_kinematics(ARM, START).position
    box = BoxObstacle((tcp[0], tcp[1], 0.09), (0.04, 0.04, 0.09))
    scene = Scene(goal_pos=(0.35, -0.2, TABLE_Z), obstacles=(box,), workspace_bounds=EMPTY.workspace_bounds)
    env, _ = fresh(scene)
    for _ in range(10):
        out = env.step([0.0, 0.0, -0.05])
        if out.terminated:
            break
    assert out.terminated and out.clearance < 0
    assert out.flags[1] == 0
    assert out.reward_terms[2] == -1.0


def test_horizon_truncates_without_task_flag():
    env, _ = fresh(cfg=EnvConfig(horizon=5))
    outs = [env.step(np.zeros(3)) for _ in range(5)]
    assert [o.truncated for o in outs] == [False] * 4 + [True]
    assert outs[-1].flags == (0, 1)
    assert outs[-1].observation.t == 1.0


def fuzz_episodes(n_episodes, seed):
    rng = np.random.default_rng(seed)
    dist = SceneDistribution()
    env = ReachEnv(ARM, CFG)
    for _ in range(n_episodes):
        scene = dist.sample(rng)
        obs = env.reset(scene, START)
        d0 = float(np.linalg.norm(obs.pos_tcp - scene.goal_pos))
        goal_dir = scene.goal_pos - obs.pos_tcp
        steps = []
        while True:
            a = 0.6 * CFG.a_max * goal_dir / np.linalg.norm(goal_dir) + rng.normal(0, 0.03, 3)
            out = env.step(a)
            steps.append(out)
            if out.terminated or out.truncated:
                break
        yield scene, d0, steps


def test_reward_decomposition_and_flags_fuzz():
    c1, c2, c3 = CFG.c1, CFG.c2, CFG.c3
    for scene, d0, steps in fuzz_episodes(100, 0):
        last_t = -1.0
        for out in steps:
            r_g, r_a, r_o = out.reward_terms
            assert out.reward == c1 * r_g + c2 * r_a + c3 * r_o
            assert not (out.terminated and out.truncated)
            arr = out.observation.to_array()
            assert arr.shape == (OBS_DIM,) and np.all(np.isfinite(arr))
            assert out.observation.t >= last_t
            last_t = out.observation.t
        # telescoping progress term
        assert sum(o.reward_terms[0] for o in steps) == pytest.approx(d0 - steps[-1].distance_to_goal, abs=1e-9)
        final = steps[-1]
        if final.flags[0]:
            assert final.distance_to_goal <= CFG.goal_radius
        if final.flags[1] == 0:
            assert any(o.clearance < 0 for o in steps)
        else:
            assert all(o.clearance >= 0 for o in steps)


def test_determinism():
    a = [[tuple(o.observation.to_array()) + (o.reward,) for o in s] for _, _, s in fuzz_episodes(5, 7)]
    b = [[tuple(o.observation.to_array()) + (o.reward,) for o in s] for _, _, s in fuzz_episodes(5, 7)]
    assert a == b


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=17, max_size=17))
def test_observation_round_trip_is_bit_exact(values):
    arr = np.array(values)
    assert np.array_equal(Observation.from_array(arr).to_array(), arr)


def test_observation_length_checked():
    with pytest.raises(ValueError):
        Observation.from_array(np.zeros(16))


def test_trace_csv():
    buf = io.StringIO()
    env, _ = fresh(trace=buf)
    env.step([0.01, 0.0, 0.0])
    rows = buf.getvalue().strip().splitlines()
    assert rows[0].split(",") == TRACE_COLUMNS
    assert len(rows) == 2
    assert rows[1].split(",")[-1] == "1"


def test_env_config_validation_and_round_trip():
    assert EnvConfig.from_dict(CFG.to_dict()) == CFG
    for bad in ({"c1": 0.0}, {"c2": -1.0}, {"d_thre": 0.0}, {"gamma": 1.5}, {"horizon": 0}):
        with pytest.raises(ValueError):
            EnvConfig(**bad)
    with pytest.raises(ValueError):
        EnvConfig.from_dict({"speed": 1})


def test_task_env_samples_new_scene_each_reset():
    dist = SceneDistribution()
    env = TaskEnv(ARM, CFG, dist.sample, START, seed=3)
    o1 = env.reset()
    o2 = env.reset()
    assert o1.shape == (OBS_DIM,)
    assert not np.array_equal(o1[1:3], o2[1:3])
    _, r, term, trunc, out = env.step(np.zeros(3))
    assert math.isfinite(r) and out is env.last
