from __future__ import annotations

import math
from typing import Optional

import torch

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class GaussianDist:
    """Diagonal Gaussian over the last tensor dimension."""

    def __init__(self, mean: torch.Tensor, log_std: torch.Tensor):
        self.mean = mean
        self.log_std = torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    @classmethod
    def from_params(cls, params: torch.Tensor) -> "GaussianDist":
        mean, log_std = params.chunk(2, dim=-1)
        return cls(mean, log_std)

    @classmethod
    def standard(cls, like: torch.Tensor) -> "GaussianDist":
        return cls(torch.zeros_like(like), torch.zeros_like(like))

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def sample(self, generator: Optional[torch.Generator] = None, reparameterized: bool = True) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device)
        z = self.mean + self.std * eps
        return z if reparameterized else z.detach()

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        var = (2 * self.log_std).exp()
        return (-0.5 * (x - self.mean) ** 2 / var - self.log_std - 0.5 * math.log(2 * math.pi)).sum(-1)

    def kl_to(self, other: "GaussianDist") -> torch.Tensor:
        """Closed-form KL(self || other), summed over the last dimension."""
        var_ratio = (2 * (self.log_std - other.log_std)).exp()
        mean_term = ((self.mean - other.mean) / other.std) ** 2
        return 0.5 * (var_ratio + mean_term - 1.0 - 2 * (self.log_std - other.log_std)).sum(-1)

    def detach(self) -> "GaussianDist":
        return GaussianDist(self.mean.detach(), self.log_std.detach())

    def __getitem__(self, idx) -> "GaussianDist":
        return GaussianDist(self.mean[idx], self.log_std[idx])
