"""Point-mass navigation environments with explicit domain factors.

A damped double integrator moves through an ordered list of waypoints. Domains
differ by wind, action noise, a linear embodiment gain applied to actions and
a horizon scale on per-step displacement. Observations are identical across
domains: ``(position, velocity, current_waypoint - position)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

OBS_DIM = 6
ACT_DIM = 2

FACTORS = ("noise", "wind", "embodiment", "horizon")
DISPARITIES = ("low", "medium", "high")
DISPARITY_LEVELS = ("source",) + DISPARITIES

# Perturbation magnitude per factor and disparity level.
#   noise: std of executed-action noise
#   wind: wind speed (direction drawn from the domain seed)
#   embodiment: rotation of the action frame in degrees (sign drawn from the seed)
#   horizon: 1 - horizon_scale
DEFAULT_MAGNITUDES = {
    "noise": {"low": 0.02, "medium": 0.05, "high": 0.1},
    "wind": {"low": 0.1, "medium": 0.2, "high": 0.4},
    "embodiment": {"low": 20.0, "medium": 40.0, "high": 60.0},
    "horizon": {"low": 0.2, "medium": 0.4, "high": 0.6},
}


class EnvUsageError(RuntimeError):
    """Raised when an environment is driven outside its contract."""


@dataclass(frozen=True)
class EnvParams:
    damping: float = 0.95
    dt: float = 0.1
    start_half_width: float = 0.05
    expert_gain: float = 2.0
    expert_max_speed: float = 0.5
    magnitudes: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_MAGNITUDES.items()})


DEFAULT_PARAMS = EnvParams()


@dataclass(frozen=True)
class DomainSpec:
    wind: tuple = (0.0, 0.0)
    action_noise_sigma: float = 0.0
    embodiment_gain: tuple = ((1.0, 0.0), (0.0, 1.0))
    horizon_scale: float = 1.0
    disparity_level: str = "source"
    name: str = "source"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.disparity_level not in DISPARITY_LEVELS:
            raise ValueError(f"unknown disparity level {self.disparity_level!r}")
        if not self.action_noise_sigma >= 0:
            raise ValueError("action_noise_sigma must be non-negative")
        if not self.horizon_scale > 0:
            raise ValueError("horizon_scale must be positive")
        gain = self.gain
        if gain.shape != (2, 2) or abs(np.linalg.det(gain)) <= 1e-6:
            raise ValueError("embodiment_gain must be an invertible 2x2 matrix")
        if len(self.wind) != 2:
            raise ValueError("wind must be a 2-vector")
        if self.disparity_level == "source" and not self.is_source_like():
            raise ValueError("a source-level domain must carry source factor values")

    def is_source_like(self) -> bool:
        return (
            tuple(self.wind) == (0.0, 0.0)
            and self.action_noise_sigma == 0.0
            and np.array_equal(self.gain, np.eye(2))
            and self.horizon_scale == 1.0
        )

    @property
    def gain(self) -> np.ndarray:
        return np.asarray(self.embodiment_gain, dtype=np.float64)

    @property
    def wind_vec(self) -> np.ndarray:
        return np.asarray(self.wind, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "wind": [float(w) for w in self.wind],
            "action_noise_sigma": float(self.action_noise_sigma),
            "embodiment_gain": [[float(g) for g in row] for row in self.embodiment_gain],
            "horizon_scale": float(self.horizon_scale),
            "disparity_level": self.disparity_level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(
            wind=tuple(float(w) for w in d["wind"]),
            action_noise_sigma=float(d["action_noise_sigma"]),
            embodiment_gain=tuple(tuple(float(g) for g in row) for row in d["embodiment_gain"]),
            horizon_scale=float(d["horizon_scale"]),
            disparity_level=d["disparity_level"],
            name=d.get("name", "domain"),
        )


SOURCE = DomainSpec()


@dataclass(frozen=True)
class TaskSpec:
    waypoints: tuple
    goal_tolerance: float = 0.1
    max_steps: int = 80
    name: str = "task"

    def __post_init__(self):
        if len(self.waypoints) < 1:
            raise ValueError("a task needs at least one waypoint")
        if not self.goal_tolerance > 0:
            raise ValueError("goal_tolerance must be positive")
        if int(self.max_steps) < 1:
            raise ValueError("max_steps must be positive")

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "waypoints": [[float(x), float(y)] for x, y in self.waypoints],
            "goal_tolerance": float(self.goal_tolerance),
            "max_steps": int(self.max_steps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            waypoints=tuple(tuple(float(c) for c in w) for w in d["waypoints"]),
            goal_tolerance=float(d["goal_tolerance"]),
            max_steps=int(d["max_steps"]),
            name=d.get("name", "task"),
        )


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    velocity: np.ndarray
    waypoint_index: int = 0
    step_count: int = 0
    done: bool = False


def make_domain(factor: str, disparity: str, seed: int = 0,
                params: EnvParams = DEFAULT_PARAMS) -> DomainSpec:
    """Single-factor domain at a documented disparity magnitude.

    The seed only picks orientation (wind heading, rotation sign); the
    magnitude comes from ``params.magnitudes``.
    """
    if factor not in FACTORS:
        raise ValueError(f"unknown factor {factor!r}")
    if disparity not in DISPARITIES:
        raise ValueError(f"unknown disparity {disparity!r}")
    mag = float(params.magnitudes[factor][disparity])
    rng = np.random.default_rng([int(seed), FACTORS.index(factor)])
    name = f"{factor}-{disparity}-{seed}"
    if factor == "noise":
        return DomainSpec(action_noise_sigma=mag, disparity_level=disparity, name=name)
    if factor == "wind":
        heading = rng.uniform(0.0, 2.0 * math.pi)
        wind = (mag * math.cos(heading), mag * math.sin(heading))
        return DomainSpec(wind=wind, disparity_level=disparity, name=name)
    if factor == "embodiment":
        theta = math.radians(mag) * (1.0 if rng.uniform() < 0.5 else -1.0)
        c, s = math.cos(theta), math.sin(theta)
        return DomainSpec(embodiment_gain=((c, -s), (s, c)), disparity_level=disparity, name=name)
    return DomainSpec(horizon_scale=1.0 - mag, disparity_level=disparity, name=name)


def make_tasks(n: int, n_waypoints: int = 1, seed: int = 0, *, radius=(0.6, 1.0),
               hop=(0.5, 0.9), arena: float = 1.3, steps_per_waypoint: int = 40,
               goal_tolerance: float = 0.1) -> list[TaskSpec]:
    """Random waypoint tasks; headings are spread evenly then jittered."""
    rng = np.random.default_rng([int(seed), 7919])
    base = rng.uniform(0.0, 2.0 * math.pi)
    tasks = []
    for i in range(n):
        heading = base + 2.0 * math.pi * i / n + rng.uniform(-0.3, 0.3) * math.pi / max(n, 1)
        r = rng.uniform(*radius)
        pts = [np.array([r * math.cos(heading), r * math.sin(heading)])]
        while len(pts) < n_waypoints:
            for _ in range(100):
                ang = rng.uniform(0.0, 2.0 * math.pi)
                cand = pts[-1] + rng.uniform(*hop) * np.array([math.cos(ang), math.sin(ang)])
                if np.linalg.norm(cand) <= arena:
                    break
            pts.append(cand)
        tasks.append(TaskSpec(
            waypoints=tuple((round(float(p[0]), 6), round(float(p[1]), 6)) for p in pts),
            goal_tolerance=goal_tolerance,
            max_steps=steps_per_waypoint * n_waypoints,
            name=f"task{i}",
        ))
    return tasks


class PointMassEnv:
    """Stateless dynamics bound to one (task, domain) pair.

    ``reset`` and ``step`` return fresh :class:`EnvState` objects; nothing is
    mutated in place, so one instance may replay many episodes.
    """

    def __init__(self, task: TaskSpec, domain: DomainSpec, params: EnvParams = DEFAULT_PARAMS):
        domain.validate()
        self.task = task
        self.domain = domain
        self.params = params
        self._points = task.points
        self._gain = domain.gain
        self._gain_inv = np.linalg.inv(self._gain)
        self._wind = domain.wind_vec

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(int(seed))
        w = self.params.start_half_width
        pos = rng.uniform(-w, w, size=2)
        return EnvState(position=pos, velocity=np.zeros(2), waypoint_index=0, step_count=0)

    def current_waypoint(self, state: EnvState) -> np.ndarray:
        idx = min(state.waypoint_index, len(self._points) - 1)
        return self._points[idx]

    def observe(self, state: EnvState) -> np.ndarray:
        rel = self.current_waypoint(state) - state.position
        return np.concatenate([state.position, state.velocity, rel])

    def step(self, state: EnvState, action, rng: np.random.Generator):
        if state.done:
            raise EnvUsageError("step() called on a finished episode")
        p = self.params
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        executed = self._gain @ a
        if self.domain.action_noise_sigma > 0:
            executed = executed + rng.normal(0.0, self.domain.action_noise_sigma, size=2)
        vel = p.damping * state.velocity + executed
        pos = state.position + self.domain.horizon_scale * p.dt * vel + p.dt * self._wind

        idx = state.waypoint_index
        dist = float(np.linalg.norm(self._points[idx] - pos))
        reward = -dist
        if dist < self.task.goal_tolerance:
            reward += 1.0
            idx += 1
        steps = state.step_count + 1
        done = idx >= len(self._points) or steps >= self.task.max_steps
        flags = [i < idx for i in range(len(self._points))]
        new = EnvState(position=pos, velocity=vel, waypoint_index=idx, step_count=steps, done=done)
        return new, reward, done, flags

    def expert_action(self, state: EnvState) -> np.ndarray:
        if state.done:
            raise EnvUsageError("expert queried on a finished episode")
        p = self.params
        err = self.current_waypoint(state) - state.position
        ground = p.expert_gain * err
        speed = float(np.linalg.norm(ground))
        if speed > p.expert_max_speed:
            ground *= p.expert_max_speed / speed
        # velocity that yields the desired ground motion after wind, then the
        # executed action that reaches it in one step, mapped through G^-1
        vel_target = (ground - self._wind) / self.domain.horizon_scale
        executed = vel_target - p.damping * state.velocity
        return np.clip(self._gain_inv @ executed, -1.0, 1.0)


def reset(task: TaskSpec, domain: DomainSpec, seed: int, params: EnvParams = DEFAULT_PARAMS) -> EnvState:
    return PointMassEnv(task, domain, params).reset(seed)


def scripted_expert(state: EnvState, task: TaskSpec, domain: DomainSpec,
                    params: EnvParams = DEFAULT_PARAMS) -> np.ndarray:
    return PointMassEnv(task, domain, params).expert_action(state)


def rollout_expert(env: PointMassEnv, seed: int, rng: Optional[np.random.Generator] = None):
    """Run the scripted expert for one episode.

    Returns ``(observations, actions, rewards, success_flags)``.
    """
    if rng is None:
        rng = np.random.default_rng([int(seed), 31337])
    state = env.reset(seed)
    obs, acts, rews = [env.observe(state)], [], []
    flags = [False] * len(env.task.waypoints)
    while not state.done:
        a = env.expert_action(state)
        state, r, _, flags = env.step(state, a, rng)
        obs.append(env.observe(state))
        acts.append(a)
        rews.append(r)
    return np.array(obs), np.array(acts), np.array(rews), flags


def with_magnitudes(params: EnvParams, overrides: dict) -> EnvParams:
    mags = {k: dict(v) for k, v in params.magnitudes.items()}
    for factor, levels in overrides.items():
        if factor not in mags:
            raise ValueError(f"unknown factor {factor!r}")
        for level, value in levels.items():
            if level not in DISPARITIES:
                raise ValueError(f"unknown disparity {level!r}")
            mags[factor][level] = float(value)
        vals = [mags[factor][lv] for lv in DISPARITIES]
        if not all(a < b for a, b in zip(vals, vals[1:])) or vals[0] <= 0:
            raise ValueError(f"{factor} magnitudes must be positive and increase low < medium < high, got {vals}")
        if factor == "horizon" and vals[-1] >= 1:
            raise ValueError("horizon magnitudes must stay below 1")
    return replace(params, magnitudes=mags)


def factor_domain(factor: str, magnitude: float, orientation: float = 0.0, name: Optional[str] = None,
                  params: EnvParams = DEFAULT_PARAMS) -> DomainSpec:
    """Single-factor domain with an explicit magnitude.

    ``orientation`` is the wind heading in radians, or the sign of the rotation
    for embodiment domains. The disparity label is the nearest documented level.
    """
    if factor not in FACTORS:
        raise ValueError(f"unknown factor {factor!r}")
    levels = params.magnitudes[factor]
    level = min(DISPARITIES, key=lambda lv: abs(levels[lv] - magnitude))
    name = name or f"{factor}@{magnitude:g}/{orientation:.3f}"
    if factor == "noise":
        return DomainSpec(action_noise_sigma=magnitude, disparity_level=level, name=name)
    if factor == "wind":
        wind = (magnitude * math.cos(orientation), magnitude * math.sin(orientation))
        return DomainSpec(wind=wind, disparity_level=level, name=name)
    if factor == "embodiment":
        theta = math.radians(magnitude) * (1.0 if orientation >= 0 else -1.0)
        c, s = math.cos(theta), math.sin(theta)
        return DomainSpec(embodiment_gain=((c, -s), (s, c)), disparity_level=level, name=name)
    return DomainSpec(horizon_scale=1.0 - magnitude, disparity_level=level, name=name)


def training_domains(factors=("wind",), magnitudes: Optional[dict] = None, orientations: int = 4,
                     include_source: bool = True, params: EnvParams = DEFAULT_PARAMS) -> list[DomainSpec]:
    """Grid of offline training domains.

    Wind headings sit at ``(i + 0.5) * 2 pi / orientations`` and embodiment
    rotations alternate sign; noise and horizon ignore orientation.
    """
    magnitudes = magnitudes or {}
    out = [SOURCE] if include_source else []
    for factor in factors:
        mags = magnitudes.get(factor)
        if mags is None:
            lv = params.magnitudes[factor]
            mags = [0.5 * (lv["low"] + lv["medium"]), 0.5 * (lv["medium"] + lv["high"])]
        for m in mags:
            if factor == "wind":
                orients = [(i + 0.5) * 2.0 * math.pi / orientations for i in range(orientations)]
            elif factor == "embodiment":
                orients = [1.0, -1.0]
            else:
                orients = [0.0]
            for j, o in enumerate(orients):
                out.append(factor_domain(factor, float(m), o, name=f"train-{factor}-{m:g}-{j}", params=params))
    return out
