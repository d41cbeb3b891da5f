"""Gradient-free adaptation to a target domain and the ablation variants."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import Dataset
from .envs import DEFAULT_PARAMS, DomainSpec, EnvParams, PointMassEnv, TaskSpec, rollout_expert
from .models import ModelSet, parameter_hash
from .policy import Episode, SkillPolicy, macro_step, pool_prompt_fn, start_episode
from .prompting import PROMPT_MODES, PromptError, PromptPool

ABLATION_MODES = ("full", "fix", "avg", "no_crossA", "no_diffusion")


class ParameterMutation(AssertionError):
    pass


@dataclass(frozen=True)
class Variant:
    """How one ablation mode changes the pipeline."""
    mode: str
    prompt_mode: str = "full"
    offline_overrides: dict = field(default_factory=dict)
    model_overrides: dict = field(default_factory=dict)

    @property
    def needs_own_models(self) -> bool:
        return bool(self.offline_overrides or self.model_overrides)


def ablation_variants(mode: str) -> Variant:
    if mode == "full":
        return Variant("full")
    if mode in ("fix", "avg"):
        return Variant(mode, prompt_mode=mode)
    if mode == "no_crossA":
        return Variant(mode, offline_overrides={"w_A": 0.0})
    if mode == "no_diffusion":
        return Variant(mode, model_overrides={"adapter": "regression"})
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


def episode_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed), 8191, int(i)]).generate_state(1)[0])


def run_episodes(policy: SkillPolicy, models: ModelSet, episodes: Sequence[Episode], prompt_fn, rng,
                 generator: Optional[torch.Generator] = None) -> list:
    """Run every episode to completion in lockstep; returns attention entropies seen on the way."""
    live = list(episodes)
    entropies = []
    norm = models.normalizer
    while live:
        s = models.tensor(np.stack([norm.states(e.env.observe(e.state)) for e in live]))
        with torch.no_grad():
            z = policy.sample(s, generator)[0].double().numpy()
        ds = []
        for e in live:
            d, ps = prompt_fn(e.history.states)
            ds.append(d)
            if ps is not None:
                entropies.append(ps.entropy())
        macro_step(live, z, np.stack(ds), models, rng, generator)
        live = [e for e in live if not e.state.done]
    return entropies


def _zero_return(env: PointMassEnv, seed: int, rng) -> float:
    state, total = env.reset(seed), 0.0
    while not state.done:
        state, r, _, _ = env.step(state, np.zeros(2), rng)
        total += r
    return total


def adapt_and_eval(policy: SkillPolicy, models: ModelSet, domain: DomainSpec, tasks: Sequence[TaskSpec],
                   demos: Dataset, episodes: int = 50, mode: str = "full", m: int = 4,
                   temperature: float = 1.0, seed: int = 0, params: EnvParams = DEFAULT_PARAMS,
                   task_map: Optional[dict] = None) -> dict:
    """Roll out the frozen policy in ``domain`` with prompts drawn from ``demos``.

    Normalized return is (R - R_zero) / (R_expert - R_zero) over summed episode
    returns, where R_zero comes from a zero-action controller and R_expert from
    the scripted expert on the same tasks and start states.
    """
    prompt_mode = ablation_variants(mode).prompt_mode if mode in ABLATION_MODES else mode
    if prompt_mode not in PROMPT_MODES:
        raise ValueError(f"unknown prompt mode {mode!r}")
    if demos is None or len(demos) == 0:
        raise PromptError("empty demonstration set")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    before = parameter_hash(policy, models)

    pool = PromptPool.from_dataset(demos, models.normalizer, models.cfg.H, pool_id="target-demos").encode(models)
    rng = np.random.default_rng([int(seed), 9001])
    gen = torch.Generator().manual_seed(int(seed) + 77)
    prompt_fn = pool_prompt_fn(pool, models, prompt_mode, m, temperature, rng)

    eps, seeds = [], []
    for i in range(episodes):
        task = tasks[i % len(tasks)]
        env = PointMassEnv(task, domain, params)
        seeds.append(episode_seed(seed, i))
        eps.append(start_episode(env, seeds[-1], models))
    was_training = policy.training, models.training
    policy.eval()
    models.eval()
    entropies = run_episodes(policy, models, eps, prompt_fn, rng, gen)
    policy.train(was_training[0])
    models.train(was_training[1])

    after = parameter_hash(policy, models)
    if before != after:
        raise ParameterMutation("model parameters changed during in-context adaptation")

    ret = np.array([e.ret for e in eps])
    ref_rng = np.random.default_rng([int(seed), 4242])
    expert = np.array([rollout_expert(e.env, sd, ref_rng)[2].sum() for e, sd in zip(eps, seeds)])
    zero = np.array([_zero_return(e.env, sd, ref_rng) for e, sd in zip(eps, seeds)])
    denom = expert.sum() - zero.sum()
    n_sub = max(len(t.waypoints) for t in tasks)
    sub = []
    for j in range(n_sub):
        hits = [e.flags[j] for e in eps if len(e.flags) > j]
        sub.append(float(np.mean(hits)) if hits else None)
    return {
        "mode": mode,
        "domain": domain.name,
        "episodes": int(episodes),
        "success_rate": float(np.mean([all(e.flags) for e in eps])),
        "subtask_success": sub,
        "mean_return": float(ret.mean()),
        "expert_return": float(expert.mean()),
        "normalized_return": float((ret.sum() - zero.sum()) / denom) if denom > 0 else float("nan"),
        "attention_entropy": float(np.mean(entropies)) if entropies else None,
        "parameter_hash": after,
        "pool_windows": len(pool),
    }


def evaluate_source(policy: SkillPolicy, models: ModelSet, tasks: Sequence[TaskSpec], pool_dataset: Dataset,
                    domain: DomainSpec, episodes: int = 20, seed: int = 0, **kw) -> dict:
    """Convenience wrapper: evaluation where prompts come from demonstrations of ``domain`` itself."""
    return adapt_and_eval(policy, models, domain, tasks, pool_dataset, episodes, seed=seed, **kw)
