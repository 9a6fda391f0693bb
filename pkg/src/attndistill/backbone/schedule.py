from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from ..latent import as_tensor


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative noise coefficients ``alphas_cumprod[t]`` for ``t = 0..t_max``.

    ``alphas_cumprod[0] == 1`` so that noising at ``t = 0`` is the identity.
    """

    alphas_cumprod: torch.Tensor

    def __post_init__(self):
        a = self.alphas_cumprod
        if a.ndim != 1 or a.numel() < 2:
            raise ValueError("schedule needs at least t_max = 1")
        if float(a[0]) != 1.0:
            raise ValueError("alphas_cumprod[0] must equal 1")
        if not bool((a[1:] < a[:-1]).all()) or not bool((a > 0).all()):
            raise ValueError("alphas_cumprod must be positive and strictly decreasing")

    @classmethod
    def scaled_linear(cls, t_max: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
        """The latent-diffusion "scaled linear" beta schedule."""
        if t_max < 1:
            raise ValueError("t_max must be >= 1")
        betas = torch.linspace(beta_start**0.5, beta_end**0.5, t_max, dtype=torch.float64) ** 2
        acp = torch.cumprod(1.0 - betas, dim=0)
        return cls(torch.cat([torch.ones(1, dtype=torch.float64), acp]))

    @property
    def t_max(self) -> int:
        return self.alphas_cumprod.numel() - 1

    def check(self, t: int) -> int:
        t = int(t)
        if t < 0 or t > self.t_max:
            raise ValueError(f"timestep {t} outside [0, {self.t_max}]")
        return t

    def alpha_bar(self, t: int) -> float:
        return float(self.alphas_cumprod[self.check(t)])

    def sigma(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar(t))


def add_noise(z0, t: int, noise, schedule: DiffusionSchedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``."""
    z0 = as_tensor(z0)
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.shape)}")
    a = schedule.alpha_bar(t)
    if a == 1.0:
        return z0.clone()
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * noise
