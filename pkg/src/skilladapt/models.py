"""Skill encoder, domain encoder, skill prior and the skill adapter."""
from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import container
from .data import Normalizer
from .diffusion import DiffusionSchedule, predict_clean, run_chain
from .distributions import GaussianDist
from .envs import ACT_DIM, OBS_DIM

X0_CLAMP = 10.0


@dataclass
class ModelConfig:
    obs_dim: int = OBS_DIM
    act_dim: int = ACT_DIM
    H: int = 10
    z_dim: int = 8
    d_dim: int = 4
    encoder_hidden: int = 128
    prior_hidden: int = 128
    adapter_hidden: int = 256
    layers: int = 2
    time_dim: int = 16
    K: int = 50
    beta_start: float = 1e-4
    terminal_alpha_bar: float = 0.005
    adapter: str = "diffusion"   # or "regression"
    parameterization: str = "v"  # adapter head: "v" (velocity) or "eps"; output is noise either way
    skill_weighting: str = "v"   # per-step weight of the noise error: "v" (1 / abar_k) or "eps" (uniform)
    beta: float = 1e-3           # KL weight toward N(0, I) in the skill loss
    mu: float = 0.5              # weight of the prior-side consistency KL
    delta: float = 1.0           # contrastive margin

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def mlp(inp: int, hidden: int, out: int, layers: int) -> nn.Sequential:
    mods, width = [], inp
    for _ in range(layers):
        mods += [nn.Linear(width, hidden), nn.SiLU()]
        width = hidden
    mods.append(nn.Linear(width, out))
    return nn.Sequential(*mods)


def sinusoidal(k: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1))
    args = k.to(dtype)[:, None] * freqs[None]
    return torch.cat([args.sin(), args.cos()], dim=-1)


class WindowEncoder(nn.Module):
    """Flattened (H+1 states, H actions) window -> diagonal Gaussian."""

    def __init__(self, cfg: ModelConfig, out_dim: int):
        super().__init__()
        inp = (cfg.H + 1) * cfg.obs_dim + cfg.H * cfg.act_dim
        self.net = mlp(inp, cfg.encoder_hidden, 2 * out_dim, cfg.layers)

    def forward(self, states: torch.Tensor, actions: torch.Tensor) -> GaussianDist:
        x = torch.cat([states.flatten(1), actions.flatten(1)], dim=-1)
        return GaussianDist.from_params(self.net(x))


class SkillPrior(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = mlp(cfg.obs_dim, cfg.prior_hidden, 2 * cfg.z_dim, cfg.layers)

    def forward(self, s: torch.Tensor) -> GaussianDist:
        return GaussianDist.from_params(self.net(s))


class NoiseAdapter(nn.Module):
    """epsilon(x^k, k, s_t, d, z) -> predicted noise of shape (B, H, act_dim).

    With the "v" head the network predicts v = sqrt(abar) eta - sqrt(1 - abar) a0
    and the noise is recovered as sqrt(1 - abar) x^k + sqrt(abar) v, which keeps
    the clean-sequence estimate well conditioned at high noise levels.
    """

    def __init__(self, cfg: ModelConfig, alpha_bar=None):
        super().__init__()
        if cfg.parameterization not in ("v", "eps"):
            raise ValueError(f"unknown adapter parameterization {cfg.parameterization!r}")
        self.H, self.act_dim, self.time_dim = cfg.H, cfg.act_dim, cfg.time_dim
        self.v_head = cfg.parameterization == "v"
        inp = cfg.H * cfg.act_dim + cfg.time_dim + cfg.obs_dim + cfg.d_dim + cfg.z_dim
        self.net = mlp(inp, cfg.adapter_hidden, cfg.H * cfg.act_dim, cfg.layers + 1)
        if alpha_bar is None:
            alpha_bar = DiffusionSchedule.linear(cfg.K, cfg.beta_start, cfg.terminal_alpha_bar).alpha_bar
        self.register_buffer("alpha_bar", torch.as_tensor(np.asarray(alpha_bar), dtype=torch.float32),
                             persistent=False)

    def forward(self, x_k, k, s_t, d, z):
        t = sinusoidal(k, self.time_dim, dtype=x_k.dtype)
        h = torch.cat([x_k.flatten(1), t, s_t, d, z], dim=-1)
        out = self.net(h).view(-1, self.H, self.act_dim)
        if not self.v_head:
            return out
        ab = self.alpha_bar.to(x_k.dtype)[torch.as_tensor(k).long() - 1].view(-1, 1, 1)
        return (1 - ab).sqrt() * x_k + ab.sqrt() * out


class RegressionDecoder(nn.Module):
    """Direct (s_t, d, z) -> action-sequence decoder used by the no-diffusion ablation."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.H, self.act_dim = cfg.H, cfg.act_dim
        inp = cfg.obs_dim + cfg.d_dim + cfg.z_dim
        self.net = mlp(inp, cfg.adapter_hidden, cfg.H * cfg.act_dim, cfg.layers + 1)

    def forward(self, s_t, d, z):
        return self.net(torch.cat([s_t, d, z], dim=-1)).view(-1, self.H, self.act_dim)


@contextlib.contextmanager
def frozen(*modules: nn.Module):
    """Temporarily stop parameter gradients while keeping input gradients alive."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


class ModelSet(nn.Module):
    def __init__(self, cfg: ModelConfig, normalizer: Optional[Normalizer] = None):
        super().__init__()
        self.cfg = cfg
        self.normalizer = normalizer or Normalizer.identity(cfg.obs_dim, cfg.act_dim)
        self.schedule = DiffusionSchedule.linear(cfg.K, cfg.beta_start, cfg.terminal_alpha_bar)
        self.skill_encoder = WindowEncoder(cfg, cfg.z_dim)
        self.domain_encoder = WindowEncoder(cfg, cfg.d_dim)
        self.skill_prior = SkillPrior(cfg)
        if cfg.adapter == "diffusion":
            self.adapter = NoiseAdapter(cfg, self.schedule.alpha_bar)
        elif cfg.adapter == "regression":
            self.adapter = RegressionDecoder(cfg)
        else:
            raise ValueError(f"unknown adapter kind {cfg.adapter!r}")

    @property
    def is_diffusion(self) -> bool:
        return self.cfg.adapter == "diffusion"

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    # diffusion helpers --------------------------------------------------
    def denoised_estimate(self, x_k, k, s_t, d, z) -> torch.Tensor:
        """Single-step clean-sequence estimate, clamped to keep it finite."""
        eps = self.adapter(x_k, k, s_t, d, z)
        return predict_clean(x_k, k, eps, self.schedule).clamp(-X0_CLAMP, X0_CLAMP)

    def sample_actions(self, s_t, d, z, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Normalized action sequences (B, H, act_dim) for normalized states s_t."""
        if not self.is_diffusion:
            return self.adapter(s_t, d, z)
        shape = (s_t.shape[0], self.cfg.H, self.cfg.act_dim)
        return run_chain(lambda x, k: self.adapter(x, k, s_t, d, z), shape, self.schedule,
                         generator=generator, dtype=s_t.dtype)

    @torch.no_grad()
    def act(self, obs_norm, d, z, generator: Optional[torch.Generator] = None) -> np.ndarray:
        """Raw actions in [-1, 1] for normalized observations, as a float64 array."""
        a = self.sample_actions(self.tensor(obs_norm), self.tensor(d), self.tensor(z), generator)
        raw = self.normalizer.unnormalize_actions(a.double().numpy())
        return np.clip(raw, -1.0, 1.0)

    @torch.no_grad()
    def domain_means(self, states_norm, actions_norm) -> np.ndarray:
        return self.domain_encoder(self.tensor(states_norm), self.tensor(actions_norm)).mean.double().numpy()

    @torch.no_grad()
    def skill_means(self, states_norm, actions_norm) -> np.ndarray:
        return self.skill_encoder(self.tensor(states_norm), self.tensor(actions_norm)).mean.double().numpy()

    # persistence --------------------------------------------------------
    def parameter_arrays(self, prefix: str = "model.") -> dict:
        return {prefix + k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def header(self) -> dict:
        return {
            "model_config": asdict(self.cfg),
            "schedule": self.schedule.to_dict(),
            "normalization": self.normalizer.to_dict(),
        }

    @classmethod
    def from_parts(cls, header: dict, arrays: dict, prefix: str = "model.") -> "ModelSet":
        models = cls(ModelConfig.from_dict(header["model_config"]),
                     Normalizer.from_dict(header["normalization"]))
        state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
        models.load_state_dict(state)
        return models

    def save(self, path, extra_header: Optional[dict] = None, extra_arrays: Optional[dict] = None) -> str:
        header = {"kind": "skills", **self.header(), **(extra_header or {})}
        return container.write(path, header, {**self.parameter_arrays(), **(extra_arrays or {})})

    @classmethod
    def load(cls, path) -> "ModelSet":
        header, arrays = container.read(path)
        return cls.from_parts(header, arrays)


def parameter_hash(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
