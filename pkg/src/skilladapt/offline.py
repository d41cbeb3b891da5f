"""Joint offline training of encoders, prior and adapter."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np
import torch

from . import container
from .data import Dataset
from .losses import loss_contrastive, loss_cross_A, loss_cross_E, loss_skill
from .models import ModelConfig, ModelSet

log = logging.getLogger(__name__)

LOSS_NAMES = ("skill", "cross_E", "cross_A", "con")


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class OfflineConfig:
    steps: int = 6000
    batch_size: int = 128
    lr: float = 1e-3
    w_E: float = 1.0
    w_A: float = 1.0
    w_C: float = 1.0
    synthetic_fraction: float = 0.25
    cross_A_transform: str = "log1p"   # "log1p" or "identity"; how L_cross-A enters the total loss
    grad_clip: float = 10.0
    checkpoint_every: int = 0
    log_every: int = 500

    @classmethod
    def from_dict(cls, d: dict) -> "OfflineConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown offline config keys: {sorted(unknown)}")
        return cls(**d)


class OfflineTrainer:
    def __init__(self, dataset: Dataset, model_cfg: ModelConfig, cfg: OfflineConfig, seed: int = 0,
                 dtype=torch.float32):
        if len(dataset.domains) < 2:
            raise ValueError("offline training needs a dataset with at least two domains")
        if model_cfg.H != dataset.H:
            model_cfg = ModelConfig(**{**asdict(model_cfg), "H": dataset.H})
        self.dataset = dataset
        self.cfg = cfg
        self.seed = int(seed)
        self.index = dataset.window_index(model_cfg.H)
        torch.manual_seed(self.seed)
        self.models = ModelSet(model_cfg, dataset.normalizer).to(dtype)
        self.opt = torch.optim.Adam(self.models.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng([self.seed, 17])
        self.gen = torch.Generator().manual_seed(self.seed + 1)
        self.step_count = 0
        self.history = {k: [] for k in LOSS_NAMES}

    def losses(self) -> dict:
        bs = self.cfg.batch_size
        b = self.index.sample_B(bs, self.rng)
        bp = self.index.sample_Bprime(bs, self.rng)
        bc = self.index.sample_BC(bs, self.rng)
        out = {
            "skill": loss_skill(b, self.models, self.gen),
            "cross_E": loss_cross_E(b, self.models),
            "cross_A": (loss_cross_A(bp, self.models, self.gen) if self.cfg.w_A > 0
                        else torch.zeros((), dtype=self.models.dtype)),
            "con": loss_contrastive(bc, self.models, self.gen, self.cfg.synthetic_fraction),
        }
        return out

    def _cross_A_term(self, value: torch.Tensor) -> torch.Tensor:
        # sharp encoder posteriors make the raw KL (and its gradient) grow by
        # orders of magnitude; log1p keeps the minimizer and bounds the gradient
        if self.cfg.cross_A_transform == "log1p":
            return torch.log1p(value)
        if self.cfg.cross_A_transform == "identity":
            return value
        raise ValueError(f"unknown cross_A_transform {self.cfg.cross_A_transform!r}")

    def step(self) -> dict:
        parts = self.losses()
        for name, value in parts.items():
            if not torch.isfinite(value):
                raise TrainingDivergence(f"non-finite {name} loss at step {self.step_count}: {value.item()}")
        c = self.cfg
        total = (parts["skill"] + c.w_E * parts["cross_E"] + c.w_A * self._cross_A_term(parts["cross_A"])
                 + c.w_C * parts["con"])
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        if c.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.models.parameters(), c.grad_clip)
        self.opt.step()
        self.step_count += 1
        values = {k: float(v.detach()) for k, v in parts.items()}
        for k, v in values.items():
            self.history[k].append(v)
        return values

    def train(self, steps: Optional[int] = None, checkpoint_path=None,
              callback: Optional[Callable[[int, dict], None]] = None) -> ModelSet:
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            values = self.step()
            n = self.step_count
            if callback is not None:
                callback(n, values)
            if self.cfg.log_every and n % self.cfg.log_every == 0:
                log.info("offline step %d %s", n, json.dumps({k: round(v, 4) for k, v in values.items()}))
            if checkpoint_path and self.cfg.checkpoint_every and n % self.cfg.checkpoint_every == 0:
                self.save(checkpoint_path)
        return self.models

    # checkpoints ----------------------------------------------------------
    def _optimizer_arrays(self) -> tuple[dict, dict]:
        state = self.opt.state_dict()
        arrays, steps = {}, {}
        for pid, st in state["state"].items():
            steps[str(pid)] = float(st["step"])
            arrays[f"opt.{pid}.exp_avg"] = st["exp_avg"].numpy()
            arrays[f"opt.{pid}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
        return {"steps": steps}, arrays

    def save(self, path, extra_header: Optional[dict] = None) -> str:
        opt_header, opt_arrays = self._optimizer_arrays()
        header = {
            "offline_config": asdict(self.cfg),
            "seed": self.seed,
            "step": self.step_count,
            "optimizer": opt_header,
            "numpy_rng": self.rng.bit_generator.state,
            "history": self.history,
            **(extra_header or {}),
        }
        arrays = {**opt_arrays, "torch_rng": self.gen.get_state().numpy()}
        return self.models.save(path, header, arrays)

    @classmethod
    def resume(cls, path, dataset: Dataset) -> "OfflineTrainer":
        header, arrays = container.read(path)
        trainer = cls(dataset, ModelConfig.from_dict(header["model_config"]),
                      OfflineConfig.from_dict(header["offline_config"]), header["seed"])
        loaded = ModelSet.from_parts(header, arrays)
        trainer.models.load_state_dict(loaded.state_dict())
        opt_state = trainer.opt.state_dict()
        for pid, step in header["optimizer"]["steps"].items():
            opt_state["state"][int(pid)] = {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(arrays[f"opt.{pid}.exp_avg"]),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt.{pid}.exp_avg_sq"]),
            }
        trainer.opt.load_state_dict(opt_state)
        trainer.rng.bit_generator.state = header["numpy_rng"]
        trainer.gen.set_state(torch.from_numpy(arrays["torch_rng"]))
        trainer.step_count = header["step"]
        trainer.history = {k: list(v) for k, v in header["history"].items()}
        return trainer


def offline_train(dataset: Dataset, model_cfg: Optional[ModelConfig] = None,
                  cfg: Optional[OfflineConfig] = None, seed: int = 0, out=None) -> tuple[ModelSet, OfflineTrainer]:
    trainer = OfflineTrainer(dataset, model_cfg or ModelConfig(), cfg or OfflineConfig(), seed)
    models = trainer.train(checkpoint_path=out)
    if out is not None:
        trainer.save(out)
    return models, trainer
