"""Ancestral sampling with the clean-latent (x0) parameterisation.

Supports strided sub-schedules: for consecutive selected steps t > p the
reverse kernel is the forward-process posterior q(z_p | z_t, x0) with
effective alpha = abar_t / abar_p. The final step returns the x0 prediction
itself, so a single-step run equals the denoiser output at t = 1 exactly.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from ..datagen.mel import linear_to_logmel, mel_to_linear
from ..errors import ConfigError
from .dit import DiT
from .partition import build_set_condition, partition, unpartition
from .schedule import DiffusionSchedule


def sampling_timesteps(schedule_T: int, n_steps: int) -> list[int]:
    """Descending 1-indexed steps, ending at 1; n_steps == 1 gives [1]."""
    if n_steps < 1:
        raise ConfigError("need at least one sampling step")
    if n_steps > schedule_T:
        raise ConfigError(f"T_steps={n_steps} exceeds schedule length {schedule_T}")
    ts = np.unique(np.round(np.linspace(1, schedule_T, n_steps)).astype(int))
    return [int(t) for t in ts[::-1]]


@torch.no_grad()
def sample_latents(
    dit: DiT,
    schedule: DiffusionSchedule,
    cond: torch.Tensor,
    n_sources: int,
    grid_shape: tuple[int, int, int],
    n_steps: int,
    rng: torch.Generator | None = None,
    mode: str = "set",
    patches: int = 25,
) -> list[torch.Tensor]:
    """Draw N_s clean latent grids given condition patches.

    mode "set": one reverse chain over all N_s x L patches jointly.
    mode "single": one chain per source block, N_s x T_steps denoiser calls.
    """
    if mode not in ("set", "single"):
        raise ConfigError(f"unknown sampling mode {mode!r}")
    c, t_z, d = grid_shape
    if mode == "set":
        blocks = [cond]
    else:
        if cond.shape[-2] % n_sources != 0:
            raise ConfigError("condition patches not divisible by source count")
        per = cond.shape[-2] // n_sources
        blocks = [cond[..., i * per : (i + 1) * per, :] for i in range(n_sources)]

    outputs: list[torch.Tensor] = []
    for block in blocks:
        p = block.shape[-2]
        z = torch.randn((p, t_z // patches * d * c), generator=rng, dtype=block.dtype)
        ts = sampling_timesteps(schedule.T, n_steps)
        for i, t in enumerate(ts):
            prev = ts[i + 1] if i + 1 < len(ts) else 0
            x0 = dit(z, torch.tensor([t]), block)
            if prev == 0:
                z = x0
                continue
            ab_t = schedule.alpha_bar_at(t)
            ab_p = schedule.alpha_bar_at(prev)
            a_eff = ab_t / ab_p
            coef_x0 = math.sqrt(ab_p) * (1.0 - a_eff) / (1.0 - ab_t)
            coef_zt = math.sqrt(a_eff) * (1.0 - ab_p) / (1.0 - ab_t)
            var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - a_eff)
            noise = torch.randn(z.shape, generator=rng, dtype=z.dtype)
            z = coef_x0 * x0 + coef_zt * z + math.sqrt(var) * noise
        grids = unpartition(z, c, t_z, d, patches=patches)
        if grids.dim() == 3:
            outputs.append(grids)
        else:
            outputs.extend(grids[i] for i in range(grids.shape[0]))
    return outputs


def sample_from_bundles(
    dit: DiT,
    schedule: DiffusionSchedule,
    bundles,
    grid_shape: tuple[int, int, int],
    n_steps: int,
    rng: torch.Generator | None = None,
    mode: str = "set",
    patches: int = 25,
) -> list[torch.Tensor]:
    cond = build_set_condition(bundles, patches=patches)
    return sample_latents(
        dit, schedule, cond, len(bundles), grid_shape, n_steps, rng, mode, patches
    )


def latents_to_mels(latent_ae, latents: list[torch.Tensor]) -> list[torch.Tensor]:
    with torch.no_grad():
        return [latent_ae.decode(z) for z in latents]


def mels_to_mixture(mels: list[torch.Tensor]) -> torch.Tensor:
    """Sum source mels in the linear-amplitude domain and re-log."""
    linear = sum(
        torch.from_numpy(mel_to_linear(m.detach().cpu().numpy())) for m in mels
    )
    return torch.from_numpy(linear_to_logmel(linear.numpy()))


def latents_to_mixture(latent_ae, latents: list[torch.Tensor]) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Decode every latent and combine into a mixture mel."""
    mels = latents_to_mels(latent_ae, latents)
    return mels_to_mixture(mels), mels


__all__ = [
    "sampling_timesteps",
    "sample_latents",
    "sample_from_bundles",
    "latents_to_mels",
    "mels_to_mixture",
    "latents_to_mixture",
    "partition",
]
