import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skilladapt import container
from skilladapt.data import (Dataset, DatasetError, ExpertFailure, Trajectory, generate_dataset, generate_fewshot,
                             sample_batch_B, sample_batch_BC, sample_batch_Bprime, task_substitution,
                             waypoint_distance)
from skilladapt.envs import SOURCE, DomainSpec, TaskSpec, make_domain, make_tasks


@pytest.fixture(scope="module")
def small():
    doms = [SOURCE, make_domain("wind", "medium", 0)]
    return generate_dataset(doms, make_tasks(3, 1, seed=0), 10, seed=0)


def test_count_contract(small):
    assert len(small) == 60
    assert small.domain_ids == sorted([SOURCE.name, "wind-medium-0"])


def test_regeneration_byte_identical(tmp_path):
    doms = [SOURCE, make_domain("noise", "high", 0)]
    tasks = make_tasks(2, 2, seed=3)
    h1 = generate_dataset(doms, tasks, 2, seed=9, path=tmp_path / "a.skad").to_bytes()
    h2 = generate_dataset(doms, tasks, 2, seed=9, path=tmp_path / "b.skad").to_bytes()
    assert h1 == h2
    assert (tmp_path / "a.skad").read_bytes() == (tmp_path / "b.skad").read_bytes()


def test_singular_gain_rejected_before_generation():
    with pytest.raises(ValueError):
        bad = DomainSpec(embodiment_gain=((0.0, 0.0), (0.0, 0.0)), disparity_level="low", name="bad")
        generate_dataset([bad], make_tasks(1), 1, 0)


def test_expert_failure_threshold(monkeypatch):
    dom = make_domain("wind", "low", 0)
    with pytest.raises(ExpertFailure):
        generate_dataset([dom], make_tasks(2), 1, 0, threshold=1.01)


def test_round_trip_exact(small, tmp_path):
    p = tmp_path / "d.skad"
    small.save(p)
    back = Dataset.load(p)
    assert np.array_equal(back.states, small.states) and back.states.dtype == np.float32
    assert np.array_equal(back.actions, small.actions)
    assert np.array_equal(back.rewards, small.rewards)
    assert back.records == small.records and back.domains == small.domains and back.tasks == small.tasks
    np.testing.assert_array_equal(back.normalizer.state_std, small.normalizer.state_std)
    assert back.to_bytes() == small.to_bytes()


def test_container_dtypes_and_errors():
    arrays = {"f4": np.arange(6, dtype=np.float32).reshape(2, 3), "f8": np.array([1.5, -2.0]),
              "i8": np.array([1, -2, 3]), "u1": np.array([0, 255], dtype=np.uint8)}
    header, back = container.loads(container.dumps({"x": 1}, arrays))
    assert header["x"] == 1
    for k, v in arrays.items():
        assert np.array_equal(back[k], v) and back[k].dtype == v.dtype
    raw = container.dumps({}, arrays)
    with pytest.raises(container.ContainerError):
        container.loads(b"NOTMAGIC" + raw[8:])
    with pytest.raises(container.ContainerError):
        container.loads(raw[:-3])
    with pytest.raises(container.ContainerError):
        container.dumps({}, {"c": np.array([1 + 2j])})


def test_unwritable_path(small):
    with pytest.raises(OSError):
        small.save("/proc/definitely/not/here.skad")


def test_trajectory_invariant():
    with pytest.raises(DatasetError):
        Trajectory(np.zeros((3, 6)), np.zeros((3, 2)), np.zeros(3), "d", SOURCE, "t")


def test_batch_shapes_and_domain_constraints(small):
    rng = np.random.default_rng(0)
    b = sample_batch_B(small, 32, 10, rng)
    assert b.states.shape == (32, 11, 6) and b.actions.shape == (32, 10, 2)
    p = sample_batch_Bprime(small, 10_000, 10, rng)
    assert np.all(p.anchor.domain != p.other.domain)
    t = sample_batch_BC(small, 10_000, 10, rng)
    assert np.all(t.anchor.domain == t.positive.domain)
    assert np.all(t.anchor.domain != t.negative.domain)
    # positives are different windows from the anchor
    assert np.mean((t.anchor.traj == t.positive.traj) & (t.anchor.start == t.positive.start)) == 0


def test_windows_are_parent_slices(small):
    idx = small.window_index(10)
    rng = np.random.default_rng(1)
    b = idx.sample_B(200, rng)
    raw = idx.gather(np.arange(len(idx)), normalized=False)
    norm = small.normalizer
    for i in range(len(b)):
        traj = small.trajectory(b.traj[i])
        s0 = b.start[i]
        np.testing.assert_array_equal(b.states[i], norm.states(traj.states[s0:s0 + 11]))
        np.testing.assert_array_equal(b.actions[i], norm.actions(traj.actions[s0:s0 + 10]))
    assert raw.states.shape[0] == len(idx)


def test_normalized_state_mean_near_zero(small):
    # recompute window-coverage statistics from the raw stored arrays
    idx = small.window_index(10)
    raw = idx.all_windows(normalized=False).states.reshape(-1, 6).astype(np.float64)
    np.testing.assert_allclose(raw.mean(0), small.normalizer.state_mean, atol=1e-5)
    np.testing.assert_allclose(raw.std(0), small.normalizer.state_std, rtol=1e-4)
    b = sample_batch_B(small, 10_000, 10, np.random.default_rng(2))
    assert np.all(np.abs(b.states.reshape(-1, 6).mean(0)) < 0.05)


def test_single_domain_cannot_pair():
    ds = generate_dataset([SOURCE], make_tasks(2), 2, 0)
    with pytest.raises(DatasetError):
        sample_batch_Bprime(ds, 4, 10, np.random.default_rng(0))
    with pytest.raises(DatasetError):
        sample_batch_BC(ds, 4, 10, np.random.default_rng(0))


def test_fewshot_round_robin():
    tasks = make_tasks(4, 1, seed=2)
    demos = generate_fewshot(make_domain("wind", "low", 0), tasks, 5, seed=0)
    assert len(demos) == 5
    assert [r["task_id"] for r in demos.records] == ["task0", "task1", "task2", "task3", "task0"]
    assert len(generate_fewshot(SOURCE, tasks, 1, seed=0)) == 1
    with pytest.raises(DatasetError):
        generate_fewshot(SOURCE, tasks, 0)
    with pytest.raises(DatasetError):
        generate_fewshot(SOURCE, tasks, 6)
    assert len(generate_fewshot(SOURCE, tasks, 6, max_shots=None)) == 6


def _demos_for(tasks):
    trajs = [t for task in tasks for t in generate_fewshot(SOURCE, [task], 1, seed=0).trajectories()]
    return Dataset.from_trajectories(trajs, {t.name: t for t in tasks})


def test_task_substitution_identity_and_counts():
    tasks = make_tasks(25, 1, seed=0)
    demos = _demos_for(tasks)
    same, mapping = task_substitution(demos, 1.0, tasks)
    assert same is demos and all(k == v for k, v in mapping.items())
    reduced, mapping = task_substitution(demos, 0.08, tasks, seed=3)
    assert len(reduced.tasks) == 2 == math.ceil(0.08 * 25)
    assert set(mapping.values()) == set(reduced.tasks)
    for name, sub in mapping.items():
        t = demos.tasks[name]
        best = min(waypoint_distance(t, reduced.tasks[k]) for k in reduced.tasks)
        assert waypoint_distance(t, reduced.tasks[sub]) == best


def test_task_substitution_identical_twin():
    a = TaskSpec(waypoints=((0.5, 0.5),), max_steps=40, name="a")
    twin = TaskSpec(waypoints=((0.5, 0.5),), max_steps=40, name="twin")
    far = TaskSpec(waypoints=((-0.9, 0.0),), max_steps=40, name="far")
    demos = _demos_for([a, twin, far])
    for seed in range(10):
        reduced, mapping = task_substitution(demos, 0.5, [a, twin, far], seed=seed)
        kept = set(reduced.tasks)
        if "a" in kept and "twin" not in kept:
            assert mapping["twin"] == "a"
        if "twin" in kept and "a" not in kept:
            assert mapping["a"] == "twin"
    with pytest.raises(DatasetError):
        task_substitution(demos, 0.0, [a])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.floats(0.01, 1.0))
def test_substitution_keeps_ceil_fraction(n, frac):
    tasks = make_tasks(n, 1, seed=n)
    demos = _demos_for(tasks)
    reduced, mapping = task_substitution(demos, frac, tasks, seed=1)
    assert len(reduced.tasks) == max(1, math.ceil(frac * n - 1e-9))
    assert set(mapping) == {t.name for t in tasks}
