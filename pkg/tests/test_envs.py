import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skilladapt.envs import (DEFAULT_PARAMS, DISPARITIES, FACTORS, OBS_DIM, SOURCE, DomainSpec, EnvUsageError,
                             PointMassEnv, TaskSpec, make_domain, make_tasks, reset, rollout_expert,
                             scripted_expert, training_domains)

ONE = TaskSpec(waypoints=((0.8, 0.0),), max_steps=40, name="one")


def test_reset_contract_and_determinism():
    s0 = reset(ONE, SOURCE, 0)
    assert np.array_equal(s0.velocity, [0.0, 0.0]) and s0.waypoint_index == 0 and s0.step_count == 0
    again = reset(ONE, SOURCE, 0)
    assert np.array_equal(s0.position, again.position)
    assert not np.array_equal(s0.position, reset(ONE, SOURCE, 1).position)
    assert np.all(np.abs(s0.position) <= DEFAULT_PARAMS.start_half_width)


def test_zero_action_keeps_position_in_source():
    env = PointMassEnv(ONE, SOURCE)
    s = env.reset(3)
    s2, *_ = env.step(s, [0.0, 0.0], np.random.default_rng(0))
    assert np.array_equal(s2.position, s.position)


def test_wind_displacement_hand_value():
    env = PointMassEnv(ONE, DomainSpec(wind=(0.1, 0.0), disparity_level="low"))
    s = env.reset(0)
    s2, *_ = env.step(s, [0.0, 0.0], np.random.default_rng(0))
    np.testing.assert_allclose(s2.position - s.position, [0.01, 0.0], atol=1e-15)


def test_gain_equivalence():
    rng = np.random.default_rng(0)
    a = PointMassEnv(ONE, DomainSpec(embodiment_gain=((2.0, 0.0), (0.0, 2.0)), disparity_level="low"))
    b = PointMassEnv(ONE, SOURCE)
    s = a.reset(0)
    sa, *_ = a.step(s, [0.5, 0.0], rng)
    sb, *_ = b.step(s, [1.0, 0.0], rng)
    np.testing.assert_array_equal(sa.velocity, sb.velocity)
    np.testing.assert_array_equal(sa.position, sb.position)


def test_actions_clipped_before_domain_transform():
    env = PointMassEnv(ONE, SOURCE)
    s = env.reset(0)
    big, *_ = env.step(s, [5.0, -7.0], np.random.default_rng(0))
    unit, *_ = env.step(s, [1.0, -1.0], np.random.default_rng(0))
    np.testing.assert_array_equal(big.velocity, unit.velocity)


def test_reward_bonus_flags_and_done():
    task = TaskSpec(waypoints=((0.0, 0.0), (0.5, 0.0)), goal_tolerance=0.1, max_steps=5, name="t")
    env = PointMassEnv(task, SOURCE)
    s = env.reset(0)
    s2, r, done, flags = env.step(s, [0.0, 0.0], np.random.default_rng(0))
    assert s2.waypoint_index == 1 and flags == [True, False] and not done
    assert r == pytest.approx(1.0 - np.linalg.norm(s2.position))
    # the next reward measures distance to the second waypoint
    s3, r3, _, _ = env.step(s2, [0.0, 0.0], np.random.default_rng(0))
    assert r3 == pytest.approx(-np.linalg.norm(np.array([0.5, 0.0]) - s3.position))
    for _ in range(3):
        s3, _, done, _ = env.step(s3, [0.0, 0.0], np.random.default_rng(0))
    assert done and s3.step_count == 5
    with pytest.raises(EnvUsageError):
        env.step(s3, [0.0, 0.0], np.random.default_rng(0))
    with pytest.raises(EnvUsageError):
        env.expert_action(s3)


def test_observation_layout():
    env = PointMassEnv(ONE, SOURCE)
    s = env.reset(0)
    o = env.observe(s)
    assert o.shape == (OBS_DIM,)
    np.testing.assert_allclose(o[4:], np.array(ONE.waypoints[0]) - s.position)


def test_expert_direction_and_gain_halving():
    s = reset(ONE, SOURCE, 0)
    s = type(s)(position=np.zeros(2), velocity=np.zeros(2))
    task = TaskSpec(waypoints=((0.1, 0.0),), max_steps=10, name="near")
    a = scripted_expert(s, task, SOURCE)
    assert a[0] > 0 and a[1] == pytest.approx(0.0)
    doubled = DomainSpec(embodiment_gain=((2.0, 0.0), (0.0, 2.0)), disparity_level="low")
    np.testing.assert_allclose(scripted_expert(s, task, doubled), a / 2)


def test_expert_targets_next_waypoint_after_reaching():
    task = TaskSpec(waypoints=((0.0, 0.0), (0.0, 0.3)), max_steps=20, name="two")
    env = PointMassEnv(task, SOURCE)
    s, *_ = env.step(env.reset(0), [0.0, 0.0], np.random.default_rng(0))
    assert s.waypoint_index == 1
    a = env.expert_action(s)
    assert a[1] > 0


@pytest.mark.parametrize("factor", FACTORS)
def test_make_domain_single_factor_and_monotone(factor):
    doms = [make_domain(factor, lv, seed=0) for lv in DISPARITIES]
    mags = []
    for d in doms:
        touched = {
            "wind": tuple(d.wind) != (0.0, 0.0),
            "noise": d.action_noise_sigma != 0.0,
            "embodiment": not np.array_equal(d.gain, np.eye(2)),
            "horizon": d.horizon_scale != 1.0,
        }
        assert [k for k, v in touched.items() if v] == [factor]
        mags.append({"wind": np.linalg.norm(d.wind), "noise": d.action_noise_sigma,
                     "embodiment": abs(math.atan2(d.gain[1, 0], d.gain[0, 0])),
                     "horizon": 1.0 - d.horizon_scale}[factor])
    assert mags[0] < mags[1] < mags[2]
    assert make_domain(factor, "high", 5) == make_domain(factor, "high", 5)


def test_documented_wind_low_magnitude():
    d = make_domain("wind", "low", 0)
    assert np.linalg.norm(d.wind) == pytest.approx(DEFAULT_PARAMS.magnitudes["wind"]["low"])


def test_domain_invariants_rejected():
    with pytest.raises(ValueError):
        DomainSpec(embodiment_gain=((1.0, 1.0), (1.0, 1.0)), disparity_level="low")
    with pytest.raises(ValueError):
        DomainSpec(action_noise_sigma=-0.1, disparity_level="low")
    with pytest.raises(ValueError):
        DomainSpec(horizon_scale=0.0, disparity_level="low")
    with pytest.raises(ValueError):
        DomainSpec(wind=(0.1, 0.0))  # source level must carry source values


def test_task_invariants():
    with pytest.raises(ValueError):
        TaskSpec(waypoints=(), max_steps=10)
    with pytest.raises(ValueError):
        TaskSpec(waypoints=((0.0, 0.0),), goal_tolerance=0.0, max_steps=10)


def test_domain_round_trip():
    d = make_domain("embodiment", "medium", 2)
    assert DomainSpec.from_dict(d.to_dict()) == d


def test_bit_reproducible_rollouts():
    env = PointMassEnv(make_tasks(1, 2, seed=4)[0], make_domain("noise", "high", 1))
    a = rollout_expert(env, 11)
    b = rollout_expert(env, 11)
    for x, y in zip(a[:3], b[:3]):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("factor", FACTORS)
@pytest.mark.parametrize("level", DISPARITIES)
def test_expert_success_every_domain(factor, level):
    dom = make_domain(factor, level, seed=0)
    tasks = make_tasks(10, 2, seed=1)
    wins = 0
    for i in range(100):
        env = PointMassEnv(tasks[i % 10], dom)
        wins += all(rollout_expert(env, i)[3])
    assert wins >= 95


def test_training_grid_names_and_source():
    doms = training_domains(("wind",), {"wind": [0.15, 0.3]}, orientations=4)
    assert doms[0] == SOURCE and len(doms) == 9
    assert len({d.name for d in doms}) == 9


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**16))
def test_observation_dimension_identical_across_domains(ax, ay, seed):
    for f in FACTORS:
        env = PointMassEnv(ONE, make_domain(f, "high", seed))
        s, *_ = env.step(env.reset(seed), [ax, ay], np.random.default_rng(seed))
        o = env.observe(s)
        assert o.shape == (OBS_DIM,) and np.all(np.isfinite(o))
