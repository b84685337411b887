"""Patchification of latent grids for the diffusion transformer.

A latent grid [C, T, D] is viewed time-major as [T, D*C], optionally summed
with a sinusoidal positional encoding over time (clean source latents only),
then split into L equal time patches, each flattened to (T/L)*D*C values.
Source blocks are concatenated along the patch axis with no cross-source
encoding, so the patch sequence is permutation-equivariant over sources.
"""

from __future__ import annotations

import math

import torch

from ..errors import ShapeError


def sinusoidal_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """[length, dim] standard interleaved sin/cos table."""
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = pos * freqs.unsqueeze(0)
    enc = torch.zeros(length, dim, dtype=torch.float64)
    enc[:, 0::2] = torch.sin(args)[:, : (dim + 1) // 2]
    enc[:, 1::2] = torch.cos(args)[:, : dim // 2]
    return enc.to(dtype)


def _time_major(z: torch.Tensor) -> torch.Tensor:
    # [B, C, T, D] -> [B, T, D*C]
    b, c, t, d = z.shape
    return z.permute(0, 2, 3, 1).reshape(b, t, d * c)


def _grid_from_time_major(x: torch.Tensor, channels: int) -> torch.Tensor:
    b, t, dc = x.shape
    d = dc // channels
    return x.reshape(b, t, d, channels).permute(0, 3, 1, 2)


def partition(z: torch.Tensor, patches: int = 25, add_positional: bool = False) -> torch.Tensor:
    """Latent grid [B?, C, T, D] -> patch sequence [B?, L, (T/L)*D*C]."""
    single = z.dim() == 3
    zb = z.unsqueeze(0) if single else z
    if zb.dim() != 4:
        raise ShapeError(f"expected a [C, T, D] grid (optionally batched), got {tuple(z.shape)}")
    b, c, t, d = zb.shape
    if t % patches != 0:
        raise ShapeError(f"time extent {t} not divisible by {patches} patches")
    x = _time_major(zb)  # [B, T, D*C]
    if add_positional:
        x = x + sinusoidal_encoding(t, d * c, dtype=x.dtype).to(x.device)
    step = t // patches
    out = x.reshape(b, patches, step * d * c)
    return out.squeeze(0) if single else out


def unpartition(
    seq: torch.Tensor, channels: int, time: int, feat: int, patches: int = 25
) -> torch.Tensor:
    """Exact inverse of `partition` (any positional encoding is left in place)."""
    single = seq.dim() == 2
    x = seq.unsqueeze(0) if single else seq
    b, p, pd = x.shape
    if p % patches != 0:
        raise ShapeError(f"{p} patches not a multiple of {patches} per source")
    if pd * patches != time * feat * channels:
        raise ShapeError(
            f"patch dim {pd} inconsistent with grid {channels}x{time}x{feat} over {patches} patches"
        )
    n_sources = p // patches
    x = x.reshape(b * n_sources, time, feat * channels)
    grid = _grid_from_time_major(x, channels)  # [B*N, C, T, D]
    if n_sources == 1:
        out = grid.reshape(b, channels, time, feat)
    else:
        out = grid.reshape(b, n_sources, channels, time, feat)
    return out.squeeze(0) if single else out


def stack_sources(patch_blocks: list[torch.Tensor]) -> torch.Tensor:
    """Concatenate per-source patch blocks along the patch axis."""
    if not patch_blocks:
        raise ShapeError("no source blocks to stack")
    return torch.cat(patch_blocks, dim=-2)


def build_set_condition(bundles, patches: int = 25) -> torch.Tensor:
    """Partition each bundle's fused latent and concatenate the blocks.

    No positional encoding is added across (or within) condition blocks.
    """
    blocks = []
    for b in bundles:
        s = b.s if hasattr(b, "s") else b
        if s.dim() not in (3, 4):
            raise ShapeError("set condition expects grid-mode fused latents")
        blocks.append(partition(s, patches=patches, add_positional=False))
    return stack_sources(blocks)
