"""Skill-space policy learning in the source domain with a frozen skill adapter."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import container
from .data import Dataset
from .distributions import GaussianDist
from .envs import DEFAULT_PARAMS, SOURCE, DomainSpec, EnvParams, PointMassEnv, TaskSpec
from .models import ModelSet, SkillPrior, frozen, mlp, parameter_hash
from .prompting import PromptPool, StateHistory, dynamic_prompt

log = logging.getLogger(__name__)


class PolicyDivergence(FloatingPointError):
    pass


@dataclass
class PolicyConfig:
    lam: float = 0.1               # KL(pi || prior) weight
    gamma: float = 0.99            # per environment step
    polyak: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    critic_hidden: int = 128
    batch_size: int = 128
    buffer_capacity: int = 50_000
    skill_bound: float = 3.0
    env_steps: int = 30_000
    n_envs: int = 8
    updates_per_entry: float = 4.0
    start_updates: int = 256       # entries collected before the first update
    m: int = 4
    temperature: float = 1.0
    replay_prompt_windows: int = 0  # executed windows added to the source prompt pool; 0 keeps demos only
    log_every: int = 2000

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown policy config keys: {sorted(unknown)}")
        return cls(**d)


class SkillPolicy(nn.Module):
    """Gaussian actor over skills squashed into a box, plus twin critics and their targets."""

    def __init__(self, models: ModelSet, cfg: PolicyConfig):
        super().__init__()
        mc = models.cfg
        self.cfg = cfg
        self.actor = SkillPrior(mc)
        self.actor.load_state_dict(models.skill_prior.state_dict())
        self.q1 = mlp(mc.obs_dim + mc.z_dim, cfg.critic_hidden, 1, 2)
        self.q2 = mlp(mc.obs_dim + mc.z_dim, cfg.critic_hidden, 1, 2)
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        for p in list(self.q1_target.parameters()) + list(self.q2_target.parameters()):
            p.requires_grad_(False)

    def dist(self, s: torch.Tensor) -> GaussianDist:
        return self.actor(s)

    def squash(self, u: torch.Tensor) -> torch.Tensor:
        b = self.cfg.skill_bound
        return b * torch.tanh(u / b)

    def sample(self, s: torch.Tensor, generator=None) -> tuple[torch.Tensor, GaussianDist]:
        pi = self.dist(s)
        return self.squash(pi.sample(generator)), pi

    @staticmethod
    def _q(net, s, z):
        return net(torch.cat([s, z], dim=-1)).squeeze(-1)

    def q_min(self, s, z, target: bool = False):
        a, b = (self.q1_target, self.q2_target) if target else (self.q1, self.q2)
        return torch.minimum(self._q(a, s, z), self._q(b, s, z))

    def soft_update(self):
        tau = self.cfg.polyak
        with torch.no_grad():
            for net, tgt in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
                for p, pt in zip(net.parameters(), tgt.parameters()):
                    pt.mul_(1 - tau).add_(tau * p)


@dataclass
class ReplayEntry:
    s: np.ndarray          # raw observation at the start of the skill
    z: np.ndarray
    r_bar: float           # reward summed over the executed steps
    s_next: np.ndarray
    done: bool
    steps_executed: int
    rewards: Optional[np.ndarray] = None


class ReplayBuffer:
    """Fixed-capacity FIFO ring of skill transitions."""

    def __init__(self, capacity: int, obs_dim: int, z_dim: int):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim), np.float32)
        self.z = np.zeros((capacity, z_dim), np.float32)
        self.r = np.zeros(capacity, np.float64)
        self.s_next = np.zeros((capacity, obs_dim), np.float32)
        self.done = np.zeros(capacity, np.float32)
        self.steps = np.zeros(capacity, np.int64)
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, e: ReplayEntry):
        if e.steps_executed < 1:
            raise ValueError("a replay entry needs at least one executed step")
        i = self.ptr
        self.s[i], self.z[i], self.r[i] = e.s, e.z, e.r_bar
        self.s_next[i], self.done[i], self.steps[i] = e.s_next, float(e.done), e.steps_executed
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng) -> dict:
        n = min(batch_size, self.size)
        idx = rng.choice(self.size, size=n, replace=False)
        return {"s": self.s[idx], "z": self.z[idx], "r": self.r[idx], "s_next": self.s_next[idx],
                "done": self.done[idx], "steps": self.steps[idx]}


def policy_update(batch: dict, policy: SkillPolicy, models: ModelSet, actor_opt, critic_opt,
                  generator: Optional[torch.Generator] = None) -> dict:
    """One critic step and one actor step on a replay batch, then a target update.

    ``batch`` holds raw observations; they are normalized with the skill
    models' statistics before entering any network.
    """
    cfg = policy.cfg
    norm = models.normalizer
    dt = next(policy.parameters()).dtype
    s = torch.as_tensor(norm.states(batch["s"]), dtype=dt)
    s2 = torch.as_tensor(norm.states(batch["s_next"]), dtype=dt)
    z = torch.as_tensor(batch["z"], dtype=dt)
    r = torch.as_tensor(batch["r"], dtype=dt)
    done = torch.as_tensor(batch["done"], dtype=dt)
    disc = torch.as_tensor(cfg.gamma ** np.asarray(batch["steps"], dtype=np.float64), dtype=dt)
    prior = models.skill_prior

    with torch.no_grad():
        z2, pi2 = policy.sample(s2, generator)
        kl2 = pi2.kl_to(prior(s2))
        y = r + disc * (1 - done) * (policy.q_min(s2, z2, target=True) - cfg.lam * kl2)
    q1 = policy._q(policy.q1, s, z)
    q2 = policy._q(policy.q2, s, z)
    critic_loss = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
    critic_opt.zero_grad(set_to_none=True)
    critic_loss.backward()
    critic_opt.step()

    with frozen(policy.q1, policy.q2, prior):
        z_new, pi = policy.sample(s, generator)
        kl = pi.kl_to(prior(s).detach())
        actor_loss = (cfg.lam * kl - policy.q_min(s, z_new)).mean()
    actor_opt.zero_grad(set_to_none=True)
    actor_loss.backward()
    actor_opt.step()
    policy.soft_update()

    out = {"critic_loss": critic_loss.item(), "actor_loss": actor_loss.item(), "kl": kl.detach().mean().item(),
           "q": q1.detach().mean().item()}
    for k, v in out.items():
        if not np.isfinite(v):
            raise PolicyDivergence(f"non-finite {k} in policy update: {v}")
    return out


# rollouts -------------------------------------------------------------------

PromptFn = Callable[[np.ndarray], tuple]


def pool_prompt_fn(pool: PromptPool, models: ModelSet, mode: str = "full", m: int = 4,
                   temperature: float = 1.0, rng=None) -> PromptFn:
    """Closure mapping a normalized state history to ``(d, PromptSet or None)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if pool.domain_means is None:
        pool.encode(models)

    def fn(history_states):
        return dynamic_prompt(pool, history_states, models, m=m, rng=rng, temperature=temperature, mode=mode)
    return fn


@dataclass
class Episode:
    env: PointMassEnv
    state: object
    history: StateHistory
    ret: float = 0.0
    flags: Optional[list] = None
    macro_steps: int = 0


def start_episode(env: PointMassEnv, seed: int, models: ModelSet) -> Episode:
    state = env.reset(seed)
    obs = models.normalizer.states(env.observe(state))
    return Episode(env, state, StateHistory(models.cfg.H, obs), flags=[False] * len(env.task.waypoints))


@torch.no_grad()
def macro_step(episodes: Sequence[Episode], z: np.ndarray, d: np.ndarray, models: ModelSet, rng,
               generator: Optional[torch.Generator] = None) -> tuple[list, list]:
    """Generate one action sequence per live episode and execute it for up to H steps.

    Returns the replay entries and, per episode, the executed ``(states, actions)``
    window in raw coordinates (states has ``steps_executed + 1`` rows).
    """
    norm = models.normalizer
    obs = np.stack([e.env.observe(e.state) for e in episodes])
    acts = models.act(norm.states(obs), d, z, generator)
    entries, windows = [], []
    for i, ep in enumerate(episodes):
        states, rewards = [obs[i]], []
        for h in range(acts.shape[1]):
            ep.state, r, done, ep.flags = ep.env.step(ep.state, acts[i, h], rng)
            o = ep.env.observe(ep.state)
            states.append(o)
            rewards.append(r)
            ep.history.push(norm.states(o))
            if done:
                break
        n = len(rewards)
        rew = np.asarray(rewards)
        ep.ret += float(rew.sum())
        ep.macro_steps += 1
        entries.append(ReplayEntry(obs[i].astype(np.float32), np.asarray(z[i], np.float32), float(rew.sum()),
                                   states[-1].astype(np.float32), bool(ep.state.done), n, rew))
        windows.append((np.stack(states), acts[i, :n]))
    return entries, windows


def rollout_skill(env: PointMassEnv, state, history: StateHistory, policy: SkillPolicy, models: ModelSet,
                  prompt_fn: PromptFn, rng, generator: Optional[torch.Generator] = None):
    """Sample a skill, prompt a domain embedding, and execute the decoded actions.

    Returns ``(ReplayEntry, next_state)``; ``history`` is advanced in place.
    """
    if state.done:
        raise ValueError("cannot roll out a skill from a finished episode")
    ep = Episode(env, state, history, flags=[False] * len(env.task.waypoints))
    s = models.tensor(models.normalizer.states(env.observe(state)))[None]
    with torch.no_grad():
        z = policy.sample(s, generator)[0].double().numpy()
    d, _ = prompt_fn(history.states)
    entries, _ = macro_step([ep], z, np.asarray(d)[None], models, rng, generator)
    return entries[0], ep.state


class ReplayPromptPool:
    """Source prompt pool: fixed demonstration windows plus a ring of recent executed windows."""

    def __init__(self, base: PromptPool, models: ModelSet, capacity: int):
        self.models = models
        self.base = base.encode(models) if base.domain_means is None else base
        self.capacity = int(capacity)
        H = base.H
        self.states = np.zeros((capacity, H + 1, base.states.shape[2]), np.float32)
        self.actions = np.zeros((capacity, H, base.actions.shape[2]), np.float32)
        self.means = np.zeros((capacity, base.domain_means.shape[1]))
        self.ptr = 0
        self.size = 0
        self._pool = self.base

    def add(self, states_raw: np.ndarray, actions_raw: np.ndarray):
        """Store a fully executed H-step window; shorter windows are ignored."""
        H = self.base.H
        if self.capacity == 0 or len(actions_raw) < H:
            return
        norm = self.models.normalizer
        s = norm.states(states_raw).astype(np.float32)
        a = norm.actions(actions_raw).astype(np.float32)
        i = self.ptr
        self.states[i], self.actions[i] = s, a
        self.means[i] = self.models.domain_means(s[None], a[None])[0]
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self._pool = None

    @property
    def pool(self) -> PromptPool:
        if self._pool is None:
            n = self.size
            p = PromptPool(np.concatenate([self.base.states, self.states[:n]]),
                           np.concatenate([self.base.actions, self.actions[:n]]), "source+replay",
                           list(self.base.domain_ids) + ["replay"] * n)
            p.domain_means = np.concatenate([self.base.domain_means, self.means[:n]])
            self._pool = p
        return self._pool


def source_pool(dataset: Dataset, models: ModelSet, domain_id: Optional[str] = None) -> PromptPool:
    """Prompt pool over the offline dataset's source-domain trajectories."""
    if domain_id is None:
        domain_id = next(k for k, v in sorted(dataset.domains.items()) if v.is_source_like())
    demos = dataset.select(lambda r: r["domain_id"] == domain_id)
    return PromptPool.from_dataset(demos, models.normalizer, models.cfg.H, pool_id=f"source:{domain_id}").encode(models)


class PolicyTrainer:
    """Interleaves batched source-domain rollouts with policy updates."""

    def __init__(self, models: ModelSet, tasks: Sequence[TaskSpec], base_pool: PromptPool,
                 cfg: Optional[PolicyConfig] = None, seed: int = 0, domain: DomainSpec = SOURCE,
                 params: EnvParams = DEFAULT_PARAMS):
        self.cfg = cfg or PolicyConfig()
        self.models = models
        self.tasks = list(tasks)
        self.domain = domain
        self.params = params
        self.seed = int(seed)
        torch.manual_seed(self.seed)
        self.policy = SkillPolicy(models, self.cfg).to(models.dtype)
        self.actor_opt = torch.optim.Adam(self.policy.actor.parameters(), lr=self.cfg.actor_lr)
        self.critic_opt = torch.optim.Adam(list(self.policy.q1.parameters()) + list(self.policy.q2.parameters()),
                                           lr=self.cfg.critic_lr)
        self.rng = np.random.default_rng([self.seed, 23])
        self.gen = torch.Generator().manual_seed(self.seed + 5)
        self.buffer = ReplayBuffer(self.cfg.buffer_capacity, models.cfg.obs_dim, models.cfg.z_dim)
        self.prompts = ReplayPromptPool(base_pool, models, self.cfg.replay_prompt_windows)
        self.env_steps = 0
        self.updates = 0
        self.episodes_done = 0
        self.log: list[dict] = []
        self._completed: list[tuple[float, bool]] = []

    def _new_episode(self) -> Episode:
        task = self.tasks[int(self.rng.integers(len(self.tasks)))]
        env = PointMassEnv(task, self.domain, self.params)
        return start_episode(env, int(self.rng.integers(2**31)), self.models)

    def train(self, env_steps: Optional[int] = None, callback: Optional[Callable[[dict], None]] = None) -> SkillPolicy:
        cfg = self.cfg
        budget = cfg.env_steps if env_steps is None else env_steps
        models = self.models
        if budget <= 0:
            return self.policy
        eps = [self._new_episode() for _ in range(cfg.n_envs)]
        next_log = cfg.log_every
        owed = 0.0
        while self.env_steps < budget:
            s = models.tensor(np.stack([models.normalizer.states(e.env.observe(e.state)) for e in eps]))
            with torch.no_grad():
                z = self.policy.sample(s, self.gen)[0].double().numpy()
            pool = self.prompts.pool
            d = np.stack([dynamic_prompt(pool, e.history.states, models, m=cfg.m, rng=self.rng,
                                         temperature=cfg.temperature)[0] for e in eps])
            entries, windows = macro_step(eps, z, d, models, self.rng, self.gen)
            for i, (e, (ws, wa)) in enumerate(zip(entries, windows)):
                self.buffer.add(e)
                self.prompts.add(ws, wa)
                self.env_steps += e.steps_executed
                owed += cfg.updates_per_entry
                if eps[i].state.done:
                    self._completed.append((eps[i].ret, all(eps[i].flags)))
                    self.episodes_done += 1
                    eps[i] = self._new_episode()
            if len(self.buffer) >= cfg.start_updates:
                while owed >= 1.0:
                    batch = self.buffer.sample(cfg.batch_size, self.rng)
                    stats = policy_update(batch, self.policy, models, self.actor_opt, self.critic_opt, self.gen)
                    self.updates += 1
                    owed -= 1.0
            else:
                owed = 0.0
            if self.env_steps >= next_log and self._completed:
                recent = self._completed[-50:]
                rec = {"env_steps": self.env_steps, "updates": self.updates, "episodes": self.episodes_done,
                       "return": float(np.mean([r for r, _ in recent])),
                       "success": float(np.mean([s for _, s in recent]))}
                self.log.append(rec)
                if callback is not None:
                    callback(rec)
                log.info("policy %s", json.dumps(rec))
                next_log += cfg.log_every
        return self.policy


def train_policy(models: ModelSet, tasks: Sequence[TaskSpec], base_pool: PromptPool,
                 cfg: Optional[PolicyConfig] = None, seed: int = 0, out=None,
                 callback=None) -> tuple[SkillPolicy, PolicyTrainer]:
    trainer = PolicyTrainer(models, tasks, base_pool, cfg, seed)
    policy = trainer.train(callback=callback)
    if out is not None:
        save_policy(out, policy, models, {"seed": int(seed), "log": trainer.log,
                                          "tasks": [t.to_dict() for t in tasks]})
    return policy, trainer


def save_policy(path, policy: SkillPolicy, models: ModelSet, extra: Optional[dict] = None) -> str:
    header = {"kind": "policy", "policy_config": asdict(policy.cfg), "skills_hash": parameter_hash(models),
              **(extra or {})}
    arrays = {"policy." + k: v.detach().cpu().numpy() for k, v in policy.state_dict().items()}
    return container.write(path, header, arrays)


def load_policy(path, models: ModelSet, check_hash: bool = True) -> SkillPolicy:
    header, arrays = container.read(path)
    if header.get("kind") != "policy":
        raise container.ContainerError(f"{path} is not a policy checkpoint")
    if check_hash and header["skills_hash"] != parameter_hash(models):
        raise ValueError("policy checkpoint was trained against different skill models")
    policy = SkillPolicy(models, PolicyConfig.from_dict(header["policy_config"])).to(models.dtype)
    policy.load_state_dict({k[len("policy."):]: torch.from_numpy(v) for k, v in arrays.items()})
    return policy
