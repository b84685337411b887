"""Linear-beta diffusion schedule and the closed-form forward corruption."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ConfigError


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray  # [T]
    alpha: np.ndarray  # [T]
    alpha_bar: np.ndarray  # [T], cumulative products

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        """1-indexed lookup; t = 0 denotes the clean data (alpha_bar = 1)."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> DiffusionSchedule:
    if T < 1:
        raise ConfigError("schedule needs at least one step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"invalid beta range ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def forward_diffuse(
    z0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule
) -> torch.Tensor:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps for 1-indexed t.

    `t` may be an int (shared step) or a 1-D tensor of per-example steps whose
    leading dim matches z0.
    """
    if isinstance(t, int):
        if not 1 <= t <= schedule.T:
            raise ConfigError(f"t={t} outside [1, {schedule.T}]")
        ab = schedule.alpha_bar_at(t)
        return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > schedule.T):
        raise ConfigError("per-example t outside schedule range")
    ab = torch.as_tensor(schedule.alpha_bar, dtype=z0.dtype, device=z0.device)[t - 1]
    shape = (-1,) + (1,) * (z0.dim() - 1)
    ab = ab.reshape(shape)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps
