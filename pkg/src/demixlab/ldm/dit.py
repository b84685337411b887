"""Set-conditioned diffusion transformer predicting clean latents.

Post-norm blocks (self-attention and feedforward, each followed by a skip
connection and a normalisation layer) where every normalisation is adaptive:
per-token scale and shift are regressed from the condition patches summed
with a sinusoidal step embedding. Token count varies freely, so the same
network serves set conditioning (N_s blocks of patches) and single-source
conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import ConfigError, ShapeError
from .partition import sinusoidal_encoding


@dataclass(frozen=True)
class DiTConfig:
    blocks: int = 3
    heads: int = 4
    embed_dim: int = 512  # equals the latent patch size
    cond_dim: int = 1024  # equals the condition patch size
    step_dim: int = 256
    ff_mult: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must be divisible by heads")


class StepEmbedding(nn.Module):
    """Sinusoidal embedding of the diffusion step, projected to cond_dim."""

    def __init__(self, step_dim: int, cond_dim: int):
        super().__init__()
        self.step_dim = step_dim
        self.proj = nn.Sequential(
            nn.Linear(step_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.step_dim // 2
        freqs = torch.exp(
            -torch.log(torch.tensor(10000.0, dtype=torch.float64))
            * torch.arange(half, dtype=torch.float64)
            / max(half, 1)
        )
        args = t.to(torch.float64).unsqueeze(1) * freqs.unsqueeze(0)
        emb = torch.zeros(t.shape[0], self.step_dim, dtype=torch.float64)
        emb[:, 0::2] = torch.sin(args)[:, : (self.step_dim + 1) // 2]
        emb[:, 1::2] = torch.cos(args)[:, : self.step_dim // 2]
        return self.proj(emb.to(next(self.proj.parameters()).dtype))


class AdaLN(nn.Module):
    """LayerNorm whose scale/shift are regressed per token from the condition."""

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.mod = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        rho, gamma = self.mod(cond).chunk(2, dim=-1)
        return self.norm(x) * (1.0 + rho) + gamma


class DiTBlock(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.attn = nn.MultiheadAttention(cfg.embed_dim, cfg.heads, batch_first=True)
        self.norm1 = AdaLN(cfg.embed_dim, cfg.cond_dim)
        ff_dim = cfg.embed_dim * cfg.ff_mult
        self.ff = nn.Sequential(
            nn.Linear(cfg.embed_dim, ff_dim), nn.ReLU(), nn.Linear(ff_dim, cfg.embed_dim)
        )
        self.norm2 = AdaLN(cfg.embed_dim, cfg.cond_dim)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        a, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + a, cond)
        x = self.norm2(x + self.ff(x), cond)
        return x


class DiT(nn.Module):
    def __init__(self, cfg: DiTConfig | None = None):
        super().__init__()
        self.cfg = cfg or DiTConfig()
        self.step_embed = StepEmbedding(self.cfg.step_dim, self.cfg.cond_dim)
        self.blocks = nn.ModuleList(DiTBlock(self.cfg) for _ in range(self.cfg.blocks))
        self.head = nn.Linear(self.cfg.embed_dim, self.cfg.embed_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z_patches: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        """Noisy patches [B?, P, embed] + condition [B?, P, cond] -> clean-patch
        prediction of the same shape as the input."""
        single = z_patches.dim() == 2
        z = z_patches.unsqueeze(0) if single else z_patches
        c = cond.unsqueeze(0) if cond.dim() == 2 else cond
        if z.shape[-2] != c.shape[-2]:
            raise ShapeError(
                f"patch count mismatch: latents {z.shape[-2]} vs condition {c.shape[-2]}"
            )
        if z.shape[-1] != self.cfg.embed_dim or c.shape[-1] != self.cfg.cond_dim:
            raise ShapeError("patch dims do not match the transformer configuration")
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.repeat(z.shape[0])
        c = c + self.step_embed(t).unsqueeze(1)
        x = z
        for block in self.blocks:
            x = block(x, c)
        x = self.head(x)  # zero-init: clean-latent prediction starts at 0
        return x.squeeze(0) if single else x
