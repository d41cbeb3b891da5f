"""Retrieval of demonstration windows and distance-weighted domain prompts."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, Normalizer, SubTrajectory

EPS_FLOOR = 1e-6
PROMPT_MODES = ("full", "avg", "fix")


class PromptError(ValueError):
    pass


class StateHistory:
    """The last H+1 normalized observations, front-padded with s_0 early in an episode."""

    def __init__(self, H: int, first_obs):
        first = np.asarray(first_obs, dtype=np.float32)
        self.H = H
        self._buf = deque([first] * (H + 1), maxlen=H + 1)

    def push(self, obs):
        self._buf.append(np.asarray(obs, dtype=np.float32))

    @property
    def states(self) -> np.ndarray:
        return np.stack(self._buf)


class PromptPool:
    """All length-(H+1) windows of a demonstration set, in normalized coordinates."""

    def __init__(self, states: np.ndarray, actions: np.ndarray, pool_id: str = "pool",
                 domain_ids: Optional[list] = None):
        if len(states) == 0:
            raise PromptError("empty prompt pool")
        self.states = np.asarray(states, dtype=np.float32)
        self.actions = np.asarray(actions, dtype=np.float32)
        self.pool_id = pool_id
        self.domain_ids = domain_ids or ["?"] * len(states)
        self.domain_means: Optional[np.ndarray] = None

    @classmethod
    def from_dataset(cls, demos: Dataset, normalizer: Normalizer, H: int, pool_id: str = "demos") -> "PromptPool":
        states, actions, doms = [], [], []
        for traj in demos.trajectories():
            n = len(traj.actions) - H + 1
            if n <= 0:
                continue
            s = normalizer.states(traj.states)
            a = normalizer.actions(traj.actions)
            for t in range(n):
                states.append(s[t:t + H + 1])
                actions.append(a[t:t + H])
                doms.append(traj.domain_id)
        if not states:
            raise PromptError("no demonstration is long enough to form a window")
        return cls(np.stack(states), np.stack(actions), pool_id, doms)

    def __len__(self):
        return len(self.states)

    @property
    def H(self) -> int:
        return self.actions.shape[1]

    def encode(self, models) -> "PromptPool":
        self.domain_means = models.domain_means(self.states, self.actions)
        return self

    def window(self, i: int) -> SubTrajectory:
        return SubTrajectory(self.states[i], self.actions[i], self.domain_ids[i])


@dataclass
class RetrievedPrompt:
    sub_trajectory: SubTrajectory
    distance: float
    attention: float


@dataclass
class PromptSet:
    indices: np.ndarray
    distances: np.ndarray
    attention: np.ndarray
    source_pool_id: str
    pool: Optional[PromptPool] = None

    @property
    def prompts(self) -> list:
        return [RetrievedPrompt(self.pool.window(i), float(w), float(a))
                for i, w, a in zip(self.indices, self.distances, self.attention)]

    def entropy(self) -> float:
        p = self.attention[self.attention > 0]
        return float(-(p * np.log(p)).sum())


def prompt_distance(history, candidate) -> float:
    """Sum over aligned timesteps of the Euclidean distance between two state sequences."""
    h = np.asarray(getattr(history, "states", history), dtype=np.float64)
    c = np.asarray(getattr(candidate, "states", candidate), dtype=np.float64)
    if h.shape != c.shape:
        raise PromptError(f"state sequences differ in shape: {h.shape} vs {c.shape}")
    return float(np.linalg.norm(h - c, axis=-1).sum())


def pool_distances(history, pool: PromptPool) -> np.ndarray:
    h = np.asarray(getattr(history, "states", history), dtype=np.float32)
    if h.shape != pool.states.shape[1:]:
        raise PromptError(f"history shape {h.shape} does not match pool windows {pool.states.shape[1:]}")
    return np.linalg.norm(pool.states - h[None], axis=-1).sum(-1).astype(np.float64)


def retrieval_probabilities(distances, temperature: float = 1.0) -> np.ndarray:
    w = np.asarray(distances, dtype=np.float64)
    if temperature <= 0:
        p = (w == w.min()).astype(np.float64)
        return p / p.sum()
    logits = -w / temperature
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def sample_without_replacement(distances, m: int, temperature: float, rng) -> np.ndarray:
    """Successive softmax draws via Gumbel top-m; temperature 0 takes the m nearest."""
    w = np.asarray(distances, dtype=np.float64)
    if temperature <= 0:
        return np.argsort(w, kind="stable")[:m]
    keys = -w / temperature + rng.gumbel(size=len(w))
    return np.argsort(-keys, kind="stable")[:m]


def attention_weights(distances, eps_floor: float = EPS_FLOOR) -> np.ndarray:
    inv = 1.0 / (np.asarray(distances, dtype=np.float64) + eps_floor)
    return inv / inv.sum()


def retrieve(pool: PromptPool, history, m: int, temperature: float = 1.0, rng=None,
             eps_floor: float = EPS_FLOOR) -> PromptSet:
    if len(pool) == 0:
        raise PromptError("empty prompt pool")
    if not 1 <= m:
        raise PromptError("m must be >= 1")
    m = min(m, len(pool))
    rng = rng if rng is not None else np.random.default_rng(0)
    w = pool_distances(history, pool)
    idx = sample_without_replacement(w, m, temperature, rng)
    return PromptSet(idx, w[idx], attention_weights(w[idx], eps_floor), pool.pool_id, pool)


def dynamic_prompt(pool: PromptPool, history, models=None, m: int = 4, rng=None, temperature: float = 1.0,
                   mode: str = "full", eps_floor: float = EPS_FLOOR) -> tuple[np.ndarray, Optional[PromptSet]]:
    """Domain embedding for the current state history.

    ``full`` weights retrieved prompts by inverse distance, ``avg`` averages
    them uniformly and ``fix`` ignores the history and averages the whole pool.
    """
    if mode not in PROMPT_MODES:
        raise PromptError(f"unknown prompt mode {mode!r}")
    if pool.domain_means is None:
        if models is None:
            raise PromptError("pool has no cached domain embeddings and no models were given")
        pool.encode(models)
    if mode == "fix":
        return pool.domain_means.mean(0), None
    ps = retrieve(pool, history, m, temperature, rng, eps_floor)
    if mode == "avg":
        ps.attention = np.full(len(ps.indices), 1.0 / len(ps.indices))
    d = (ps.attention[:, None] * pool.domain_means[ps.indices]).sum(0)
    return d, ps
