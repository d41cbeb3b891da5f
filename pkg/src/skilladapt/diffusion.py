"""DDPM noise schedule, forward noising and the deterministic reverse chain.

Denoising steps are 1-based: ``k = K`` is (nearly) pure noise and the chain
ends at ``k = 0``, the clean action sequence. ``alpha[k - 1]`` holds the
per-step coefficient for step ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

MIN_ALPHA_BAR = 1e-8


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    alpha: np.ndarray      # (K,)
    alpha_bar: np.ndarray  # (K,) cumulative products

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or len(a) < 1:
            raise ValueError("alpha must be a non-empty vector")
        if not np.all((a > 0) & (a < 1)):
            raise ValueError("every alpha must lie in (0, 1)")
        if not np.allclose(np.cumprod(a), self.alpha_bar, rtol=1e-12, atol=0):
            raise ValueError("alpha_bar must be the cumulative product of alpha")

    @classmethod
    def from_alpha(cls, alpha) -> "DiffusionSchedule":
        alpha = np.asarray(alpha, dtype=np.float64)
        return cls(alpha, np.cumprod(alpha))

    @classmethod
    def linear(cls, K: int = 50, beta_start: float = 1e-4, terminal_alpha_bar: float = 0.005) -> "DiffusionSchedule":
        """Betas linear in k, with the last beta solved so that alpha_bar[K] hits the target."""
        if K < 1:
            raise ValueError("K must be >= 1")

        def terminal(beta_end):
            return np.prod(1.0 - np.linspace(beta_start, beta_end, K))

        if K == 1:
            return cls.from_alpha([terminal_alpha_bar])
        lo, hi = beta_start, 0.999
        if terminal(hi) > terminal_alpha_bar:
            raise ValueError(f"K={K} is too small to reach alpha_bar={terminal_alpha_bar}")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if terminal(mid) > terminal_alpha_bar:
                lo = mid
            else:
                hi = mid
        return cls.from_alpha(1.0 - np.linspace(beta_start, 0.5 * (lo + hi), K))

    @property
    def K(self) -> int:
        return len(self.alpha)

    def _gather(self, table, k, like: torch.Tensor) -> torch.Tensor:
        k_arr = torch.as_tensor(k)
        if torch.any(k_arr < 1) or torch.any(k_arr > self.K):
            raise ValueError(f"denoising step out of range [1, {self.K}]")
        vals = torch.as_tensor(table, dtype=like.dtype)[k_arr.long() - 1]
        # broadcast per-sample coefficients over the trailing dimensions
        return vals.reshape(vals.shape + (1,) * (like.dim() - vals.dim()))

    def alpha_at(self, k, like):
        return self._gather(self.alpha, k, like)

    def alpha_bar_at(self, k, like):
        return self._gather(self.alpha_bar, k, like)

    def to_dict(self) -> dict:
        return {"alpha": [float(a) for a in self.alpha]}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls.from_alpha(d["alpha"])


def forward_diffuse(a0: torch.Tensor, k, eta: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """x^k = sqrt(abar_k) a0 + sqrt(1 - abar_k) eta."""
    if eta.shape != a0.shape:
        raise ValueError("noise shape must match the clean sequence")
    ab = schedule.alpha_bar_at(k, a0)
    return ab.sqrt() * a0 + (1 - ab).sqrt() * eta


def predict_clean(x_k: torch.Tensor, k, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Invert the forward process given a noise estimate."""
    ab = schedule.alpha_bar_at(k, x_k)
    if torch.any(ab < MIN_ALPHA_BAR):
        raise ValueError("alpha_bar below 1e-8; the clean-sequence estimate would blow up")
    return (x_k - (1 - ab).sqrt() * eps) / ab.sqrt()


def reverse_step(x_k: torch.Tensor, k: int, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    a = float(schedule.alpha[k - 1])
    ab = float(schedule.alpha_bar[k - 1])
    return (x_k - (1 - a) / np.sqrt(1 - ab) * eps) / np.sqrt(a)


def run_chain(eps_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], shape, schedule: DiffusionSchedule,
              generator: Optional[torch.Generator] = None, dtype=torch.float32,
              x_K: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Deterministic posterior-mean chain from x^K ~ N(0, I) down to x^0.

    ``eps_fn(x_k, k_batch)`` returns the predicted noise.
    """
    x = torch.randn(shape, generator=generator, dtype=dtype) if x_K is None else x_K
    batch = shape[0]
    for k in range(schedule.K, 0, -1):
        eps = eps_fn(x, torch.full((batch,), k, dtype=torch.long))
        x = reverse_step(x, k, eps, schedule)
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite values in the reverse chain at step k={k}")
    return x
