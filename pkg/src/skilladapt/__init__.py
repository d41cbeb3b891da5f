"""Skill-policy adaptation with a diffusion skill adapter and retrieval-based domain prompts."""
from .adaptation import ablation_variants, adapt_and_eval
from .config import ExperimentConfig, load_config
from .data import (Dataset, generate_dataset, generate_fewshot, sample_batch_B, sample_batch_BC,
                   sample_batch_Bprime, task_substitution)
from .diffusion import DiffusionSchedule, forward_diffuse, predict_clean, run_chain
from .distributions import GaussianDist
from .envs import (SOURCE, DomainSpec, EnvState, PointMassEnv, TaskSpec, make_domain, make_tasks, reset,
                   scripted_expert)
from .models import ModelConfig, ModelSet
from .offline import OfflineConfig, OfflineTrainer, offline_train
from .policy import PolicyConfig, ReplayBuffer, ReplayEntry, SkillPolicy, policy_update, rollout_skill, train_policy
from .prompting import PromptPool, StateHistory, dynamic_prompt, prompt_distance, retrieve

__version__ = "0.1.0"
