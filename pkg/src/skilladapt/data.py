"""Offline expert datasets, few-shot demonstration sets and window sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import container
from .envs import (ACT_DIM, OBS_DIM, DEFAULT_PARAMS, DomainSpec, EnvParams, PointMassEnv,
                   TaskSpec, rollout_expert)

FORMAT_VERSION = 1
DEFAULT_H = 10
EXPERT_SUCCESS_THRESHOLD = 0.95
DEFAULT_MAX_SHOTS = 5


class ExpertFailure(RuntimeError):
    """The scripted expert fell below the success threshold in some domain."""


class DatasetError(ValueError):
    pass


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    domain_id: str
    domain_spec: DomainSpec
    task_id: str
    success: bool = True

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1 or len(self.rewards) != len(self.actions):
            raise DatasetError("trajectory needs len(states) == len(actions) + 1 == len(rewards) + 1")


@dataclass
class SubTrajectory:
    states: np.ndarray   # (H+1, obs_dim)
    actions: np.ndarray  # (H, act_dim)
    domain_id: str


def _weighted_moments(x: np.ndarray, w=None):
    if w is None or not np.any(w > 0):
        return x.mean(0), x.std(0)
    w = np.asarray(w, dtype=np.float64) / np.sum(w)
    mean = w @ x
    return mean, np.sqrt(w @ (x - mean) ** 2)


def window_coverage(lengths, H: int) -> tuple[np.ndarray, np.ndarray]:
    """How many length-H windows contain each stored state and action.

    Weighting statistics by coverage makes them match what uniform window
    sampling sees, so sampled normalized states are centred.
    """
    sw, aw = [], []
    for n in lengths:
        starts = max(n - H + 1, 0)
        j = np.arange(n + 1)
        sw.append(np.clip(np.minimum(j, starts - 1) - np.maximum(0, j - H) + 1, 0, None))
        j = np.arange(n)
        aw.append(np.clip(np.minimum(j, starts - 1) - np.maximum(0, j - H + 1) + 1, 0, None))
    return np.concatenate(sw).astype(np.float64), np.concatenate(aw).astype(np.float64)


@dataclass
class Normalizer:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray, actions: np.ndarray, floor: float = 1e-6,
            state_weights=None, action_weights=None) -> "Normalizer":
        s = np.asarray(states, dtype=np.float64)
        a = np.asarray(actions, dtype=np.float64)
        sm, ss = _weighted_moments(s, state_weights)
        am, as_ = _weighted_moments(a, action_weights)
        return cls(sm, np.maximum(ss, floor), am, np.maximum(as_, floor))

    @classmethod
    def identity(cls, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM) -> "Normalizer":
        return cls(np.zeros(obs_dim), np.ones(obs_dim), np.zeros(act_dim), np.ones(act_dim))

    def states(self, s):
        return ((np.asarray(s, dtype=np.float64) - self.state_mean) / self.state_std).astype(np.float32)

    def actions(self, a):
        return ((np.asarray(a, dtype=np.float64) - self.action_mean) / self.action_std).astype(np.float32)

    def unnormalize_actions(self, a):
        return np.asarray(a, dtype=np.float64) * self.action_std + self.action_mean

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)]
                for k in ("state_mean", "state_std", "action_mean", "action_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("state_mean", "state_std", "action_mean", "action_std")))


@dataclass
class WindowBatch:
    """A batch of H-step windows; arrays are normalized unless stated otherwise."""
    states: np.ndarray   # (B, H+1, obs_dim)
    actions: np.ndarray  # (B, H, act_dim)
    domain: np.ndarray   # (B,) integer domain codes
    task: np.ndarray     # (B,) integer task codes
    traj: np.ndarray
    start: np.ndarray

    def __len__(self):
        return len(self.states)

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(self.states[idx], self.actions[idx], self.domain[idx], self.task[idx],
                           self.traj[idx], self.start[idx])


@dataclass
class PairBatch:
    anchor: WindowBatch
    other: WindowBatch


@dataclass
class TripletBatch:
    anchor: WindowBatch
    positive: WindowBatch
    negative: WindowBatch


@dataclass
class Dataset:
    """Trajectories stored as concatenated arrays plus a JSON-able manifest."""
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    records: list            # dicts: domain_id, task_id, state_offset, action_offset, length, success
    domains: dict            # domain_id -> DomainSpec
    tasks: dict              # task_id -> TaskSpec
    H: int = DEFAULT_H
    normalizer: Optional[Normalizer] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.normalizer is None:
            sw, aw = window_coverage([r["length"] for r in self.records], self.H)
            self.normalizer = Normalizer.fit(self.states, self.actions, state_weights=sw, action_weights=aw)
        self._window_cache = {}

    # construction -------------------------------------------------------
    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], tasks: dict, H: int = DEFAULT_H,
                          meta: Optional[dict] = None,
                          normalizer: Optional[Normalizer] = None) -> "Dataset":
        if not trajs:
            raise DatasetError("empty trajectory list")
        states = np.concatenate([t.states for t in trajs]).astype(np.float32)
        actions = np.concatenate([t.actions for t in trajs]).astype(np.float32)
        rewards = np.concatenate([t.rewards for t in trajs]).astype(np.float32)
        records, so, ao = [], 0, 0
        domains = {}
        for t in trajs:
            n = len(t.actions)
            records.append({"domain_id": t.domain_id, "task_id": t.task_id, "state_offset": so,
                            "action_offset": ao, "length": n, "success": bool(t.success)})
            so += n + 1
            ao += n
            domains[t.domain_id] = t.domain_spec
        return cls(states, actions, rewards, records, domains, dict(tasks), H=H,
                   normalizer=normalizer, meta=dict(meta or {}))

    # access -------------------------------------------------------------
    def __len__(self):
        return len(self.records)

    def trajectory(self, i: int) -> Trajectory:
        r = self.records[i]
        so, ao, n = r["state_offset"], r["action_offset"], r["length"]
        return Trajectory(self.states[so:so + n + 1], self.actions[ao:ao + n], self.rewards[ao:ao + n],
                          r["domain_id"], self.domains[r["domain_id"]], r["task_id"], r["success"])

    def trajectories(self):
        return [self.trajectory(i) for i in range(len(self))]

    @property
    def domain_ids(self) -> list:
        return sorted(self.domains)

    @property
    def task_ids(self) -> list:
        return sorted(self.tasks)

    def select(self, keep) -> "Dataset":
        """Dataset restricted to trajectories for which ``keep(record)`` is true."""
        trajs = [self.trajectory(i) for i, r in enumerate(self.records) if keep(r)]
        if not trajs:
            raise DatasetError("selection is empty")
        tasks = {t.task_id: self.tasks[t.task_id] for t in trajs}
        return Dataset.from_trajectories(trajs, tasks, H=self.H, meta=self.meta, normalizer=self.normalizer)

    # windows ------------------------------------------------------------
    def window_index(self, H: Optional[int] = None) -> "WindowIndex":
        H = self.H if H is None else H
        if H not in self._window_cache:
            self._window_cache[H] = WindowIndex(self, H)
        return self._window_cache[H]

    # serialization ------------------------------------------------------
    def manifest(self) -> dict:
        return {
            "kind": "dataset",
            "version": FORMAT_VERSION,
            "obs_dim": int(self.states.shape[1]),
            "act_dim": int(self.actions.shape[1]),
            "H": int(self.H),
            "domains": {k: v.to_dict() for k, v in sorted(self.domains.items())},
            "tasks": {k: v.to_dict() for k, v in sorted(self.tasks.items())},
            "trajectories": self.records,
            "normalization": self.normalizer.to_dict(),
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        return container.dumps(self.manifest(), {"states": self.states, "actions": self.actions,
                                                 "rewards": self.rewards})

    def save(self, path) -> str:
        return container.write(path, self.manifest(), {"states": self.states, "actions": self.actions,
                                                       "rewards": self.rewards})

    @classmethod
    def from_container(cls, header: dict, arrays: dict) -> "Dataset":
        if header.get("kind") != "dataset":
            raise DatasetError("container does not hold a dataset")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset version {header.get('version')}")
        domains = {k: DomainSpec.from_dict(v) for k, v in header["domains"].items()}
        tasks = {k: TaskSpec.from_dict(v) for k, v in header["tasks"].items()}
        for r in header["trajectories"]:
            if r["domain_id"] not in domains or r["task_id"] not in tasks:
                raise DatasetError("trajectory references an unknown domain or task")
        return cls(arrays["states"], arrays["actions"], arrays["rewards"], header["trajectories"],
                   domains, tasks, H=header["H"], normalizer=Normalizer.from_dict(header["normalization"]),
                   meta=header.get("meta", {}))

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_container(*container.read(path))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Dataset":
        return cls.from_container(*container.loads(raw))


class WindowIndex:
    """All valid (trajectory, start) windows of a dataset for a fixed H."""

    def __init__(self, dataset: Dataset, H: int):
        self.dataset = dataset
        self.H = H
        self.domain_names = dataset.domain_ids
        self.task_names = dataset.task_ids
        dcode = {d: i for i, d in enumerate(self.domain_names)}
        tcode = {t: i for i, t in enumerate(self.task_names)}
        traj, start = [], []
        for i, r in enumerate(dataset.records):
            n = r["length"] - H + 1
            if n <= 0:
                raise DatasetError(f"trajectory {i} is shorter than H+1={H + 1} states")
            traj.append(np.full(n, i))
            start.append(np.arange(n))
        self.traj = np.concatenate(traj)
        self.start = np.concatenate(start)
        self.domain = np.array([dcode[dataset.records[i]["domain_id"]] for i in self.traj])
        self.task = np.array([tcode[dataset.records[i]["task_id"]] for i in self.traj])
        self.by_domain = [np.flatnonzero(self.domain == c) for c in range(len(self.domain_names))]
        # windows grouped by domain: block c is _order[_first[c]:_first[c] + _size[c]]
        self._order = np.concatenate(self.by_domain)
        self._size = np.array([len(b) for b in self.by_domain])
        self._first = np.concatenate([[0], np.cumsum(self._size)[:-1]])
        self._rank = np.empty(len(self._order), dtype=np.int64)
        self._rank[self._order] = np.arange(len(self._order))
        so = np.array([r["state_offset"] for r in dataset.records])
        ao = np.array([r["action_offset"] for r in dataset.records])
        self._s0 = so[self.traj] + self.start
        self._a0 = ao[self.traj] + self.start
        self._norm_states = dataset.normalizer.states(dataset.states)
        self._norm_actions = dataset.normalizer.actions(dataset.actions)

    def __len__(self):
        return len(self.traj)

    @property
    def n_domains(self) -> int:
        return len(self.domain_names)

    def gather(self, idx, normalized: bool = True) -> WindowBatch:
        idx = np.asarray(idx)
        srows = self._s0[idx, None] + np.arange(self.H + 1)
        arows = self._a0[idx, None] + np.arange(self.H)
        if normalized:
            s, a = self._norm_states[srows], self._norm_actions[arows]
        else:
            s, a = self.dataset.states[srows], self.dataset.actions[arows]
        return WindowBatch(s, a, self.domain[idx], self.task[idx], self.traj[idx], self.start[idx])

    def all_windows(self, normalized: bool = True) -> WindowBatch:
        return self.gather(np.arange(len(self)), normalized)

    def _other_domain(self, anchors, rng) -> np.ndarray:
        if self.n_domains < 2:
            raise DatasetError("need at least two domains to draw cross-domain samples")
        c = self.domain[anchors]
        r = (rng.random(len(anchors)) * (len(self) - self._size[c])).astype(np.int64)
        r = np.where(r >= self._first[c], r + self._size[c], r)
        return self._order[r]

    def _same_domain(self, anchors, rng) -> np.ndarray:
        c = self.domain[anchors]
        size = self._size[c]
        r = (rng.random(len(anchors)) * np.maximum(size - 1, 1)).astype(np.int64)
        pos = self._rank[anchors] - self._first[c]
        r = np.where((r >= pos) & (size > 1), r + 1, r)
        return self._order[self._first[c] + r]

    def sample_B(self, batch_size: int, rng) -> WindowBatch:
        return self.gather(rng.integers(len(self), size=batch_size))

    def sample_Bprime(self, batch_size: int, rng) -> PairBatch:
        anchors = rng.integers(len(self), size=batch_size)
        return PairBatch(self.gather(anchors), self.gather(self._other_domain(anchors, rng)))

    def sample_BC(self, batch_size: int, rng) -> TripletBatch:
        anchors = rng.integers(len(self), size=batch_size)
        pos = self._same_domain(anchors, rng)
        neg = self._other_domain(anchors, rng)
        return TripletBatch(self.gather(anchors), self.gather(pos), self.gather(neg))


def sample_batch_B(dataset: Dataset, batch_size: int, H: int, rng) -> WindowBatch:
    return dataset.window_index(H).sample_B(batch_size, rng)


def sample_batch_Bprime(dataset: Dataset, batch_size: int, H: int, rng) -> PairBatch:
    return dataset.window_index(H).sample_Bprime(batch_size, rng)


def sample_batch_BC(dataset: Dataset, batch_size: int, H: int, rng) -> TripletBatch:
    return dataset.window_index(H).sample_BC(batch_size, rng)


def _episode_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def _run_expert(domain: DomainSpec, task: TaskSpec, ep_seed: int, params: EnvParams) -> Trajectory:
    env = PointMassEnv(task, domain, params)
    obs, acts, rews, flags = rollout_expert(env, ep_seed, np.random.default_rng(ep_seed))
    return Trajectory(obs, acts, rews, domain.name, domain, task.name, success=all(flags))


def _check_unique(items, what):
    names = [x.name for x in items]
    if len(set(names)) != len(names):
        raise DatasetError(f"{what} names must be unique: {names}")


def generate_dataset(domains: Sequence[DomainSpec], tasks: Sequence[TaskSpec], episodes_per_pair: int,
                     seed: int, path=None, H: int = DEFAULT_H, params: EnvParams = DEFAULT_PARAMS,
                     threshold: float = EXPERT_SUCCESS_THRESHOLD) -> Dataset:
    """One expert trajectory per (domain, task, episode), optionally written to ``path``."""
    if episodes_per_pair < 1:
        raise DatasetError("episodes_per_pair must be >= 1")
    for d in domains:
        d.validate()
    _check_unique(domains, "domain")
    _check_unique(tasks, "task")
    trajs = []
    for di, dom in enumerate(domains):
        batch = [_run_expert(dom, task, _episode_seed(seed, di, ti, ep), params)
                 for ti, task in enumerate(tasks) for ep in range(episodes_per_pair)]
        rate = float(np.mean([t.success for t in batch]))
        if rate < threshold:
            raise ExpertFailure(f"expert success {rate:.3f} < {threshold} in domain {dom.name!r}")
        trajs.extend(batch)
    meta = {"seed": int(seed), "episodes_per_pair": int(episodes_per_pair), "role": "offline"}
    ds = Dataset.from_trajectories(trajs, {t.name: t for t in tasks}, H=H, meta=meta)
    if path is not None:
        ds.save(path)
    return ds


def generate_fewshot(target_domain: DomainSpec, tasks: Sequence[TaskSpec], shots: int, seed: int = 0,
                     path=None, H: int = DEFAULT_H, params: EnvParams = DEFAULT_PARAMS,
                     max_shots: Optional[int] = DEFAULT_MAX_SHOTS,
                     normalizer: Optional[Normalizer] = None,
                     threshold: float = EXPERT_SUCCESS_THRESHOLD) -> Dataset:
    """Few-shot target demonstrations, assigned to tasks round-robin."""
    if shots < 1:
        raise DatasetError("shots must be >= 1; an empty prompt pool is unusable")
    if max_shots is not None and shots > max_shots:
        raise DatasetError(f"shots={shots} exceeds the few-shot budget of {max_shots}")
    if not tasks:
        raise DatasetError("no tasks given")
    target_domain.validate()
    _check_unique(tasks, "task")
    trajs = [_run_expert(target_domain, tasks[j % len(tasks)], _episode_seed(seed, 104729, j), params)
             for j in range(shots)]
    rate = float(np.mean([t.success for t in trajs]))
    if rate < threshold:
        raise ExpertFailure(f"expert success {rate:.3f} < {threshold} in domain {target_domain.name!r}")
    used = {t.task_id for t in trajs}
    meta = {"seed": int(seed), "shots": int(shots), "role": "fewshot"}
    ds = Dataset.from_trajectories(trajs, {t.name: t for t in tasks if t.name in used}, H=H, meta=meta,
                                   normalizer=normalizer)
    if path is not None:
        ds.save(path)
    return ds


def waypoint_distance(a: TaskSpec, b: TaskSpec) -> float:
    """Summed Euclidean distance between index-aligned waypoints (shorter list padded with its last point)."""
    pa, pb = a.points, b.points
    n = max(len(pa), len(pb))
    pa = np.vstack([pa, np.repeat(pa[-1:], n - len(pa), 0)])
    pb = np.vstack([pb, np.repeat(pb[-1:], n - len(pb), 0)])
    return float(np.linalg.norm(pa - pb, axis=1).sum())


def task_substitution(demos: Dataset, fraction: float, tasks: Optional[Sequence[TaskSpec]] = None,
                      seed: int = 0) -> tuple[Dataset, dict]:
    """Keep demonstrations for ``ceil(fraction * num_tasks)`` tasks.

    Returns the reduced set and a map from every task id to the retained task
    whose demonstrations stand in for it.
    """
    if not 0.0 < fraction <= 1.0:
        raise DatasetError("fraction must lie in (0, 1]")
    all_tasks = list(tasks) if tasks is not None else [demos.tasks[k] for k in demos.task_ids]
    covered = [t for t in all_tasks if t.name in demos.tasks]
    if not covered:
        raise DatasetError("demonstrations cover none of the tasks")
    n_keep = max(1, math.ceil(fraction * len(all_tasks) - 1e-9))
    if n_keep >= len(covered):
        kept = covered
    else:
        rng = np.random.default_rng([int(seed), 4243])
        pick = np.sort(rng.choice(len(covered), size=n_keep, replace=False))
        kept = [covered[i] for i in pick]
    kept_names = {t.name for t in kept}
    mapping = {}
    for t in all_tasks:
        if t.name in kept_names:
            mapping[t.name] = t.name
        else:
            mapping[t.name] = min(kept, key=lambda k: (waypoint_distance(t, k), k.name)).name
    reduced = demos if len(kept) == len(covered) else demos.select(lambda r: r["task_id"] in kept_names)
    return reduced, mapping
