"""Central finite differences vs autodiff at 64-bit with frozen noise."""

import numpy as np
import pytest
import torch

from demixlab.decoder_simple import SimpleDecoderConfig, SimpleSystem, compute_batch_loss
from demixlab.encoders import EncoderConfig
from demixlab.ldm import DiT, DiTConfig, build_schedule, forward_diffuse
from demixlab.objectives import LossConfig

REL_TOL = 1e-4
FD_STEP = 1e-6


def _relative_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric), 1e-8)
    return abs(analytic - numeric) / scale


def _check_param_slices(loss_fn, module, slices, n_entries=3):
    """Compare autodiff and central differences on selected parameter entries."""
    loss = loss_fn()
    module.zero_grad()
    loss.backward()
    rng = np.random.default_rng(0)
    checked = 0
    for name, param in module.named_parameters():
        if not any(key in name for key in slices) or param.grad is None:
            continue
        flat = param.detach().reshape(-1)
        grads = param.grad.reshape(-1)
        for idx in rng.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False):
            idx = int(idx)
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + FD_STEP
                hi = float(loss_fn())
                flat[idx] = orig - FD_STEP
                lo = float(loss_fn())
                flat[idx] = orig
            fd = (hi - lo) / (2 * FD_STEP)
            analytic = float(grads[idx])
            if abs(fd) < 1e-10 and abs(analytic) < 1e-10:
                continue
            assert _relative_error(analytic, fd) < REL_TOL, (
                f"{name}[{idx}]: autodiff {analytic} vs finite difference {fd}"
            )
            checked += 1
    assert checked > 0


@pytest.fixture(scope="module")
def tiny_system64(chord_dataset):
    torch.manual_seed(0)
    system = SimpleSystem(
        EncoderConfig(conv_width=16, mlp_width=16, mlp_depth=1),
        SimpleDecoderConfig(hidden=12),
        LossConfig(prior_kind="fac"),
    ).double()
    return system


def test_composite_loss_gradients(chord_dataset, tiny_system64):
    system = tiny_system64
    idx = np.arange(3)

    default_dtype = torch.get_default_dtype()

    def loss_fn():
        # identical queries, threshold, and reparameterisation noise per call
        torch.set_default_dtype(torch.float64)
        try:
            total, _ = compute_batch_loss(
                system,
                chord_dataset,
                chord_dataset.examples("train"),
                idx,
                "train",
                np.random.default_rng(11),
                torch.Generator().manual_seed(42),
                "train",
            )
        finally:
            torch.set_default_dtype(default_dtype)
        return total

    _check_param_slices(
        loss_fn,
        system,
        slices=(
            "encoder.mixture_embedder.net.0",
            "encoder.transcriber.1",
            "encoder.timbre_head.raw_sigma",
            "encoder.film.alpha",
            "decoder.head",
            "pitch_prior.head",
        ),
    )


def test_diffusion_objective_gradients():
    torch.manual_seed(1)
    dit = DiT(DiTConfig(blocks=2, heads=2, embed_dim=64, cond_dim=128, step_dim=32, ff_mult=1)).double()
    # zero-init head blocks gradient flow into the blocks; nudge it off zero
    with torch.no_grad():
        dit.head.weight.add_(0.05 * torch.randn(64, 64, dtype=torch.float64))
    schedule = build_schedule(40)
    gen = torch.Generator().manual_seed(7)
    z0 = torch.randn(10, 64, generator=gen, dtype=torch.float64)
    cond = torch.randn(10, 128, generator=gen, dtype=torch.float64)
    eps = torch.randn(10, 64, generator=gen, dtype=torch.float64)
    t = 17

    def loss_fn():
        z_t = forward_diffuse(z0, t, eps, schedule)
        pred = dit(z_t, torch.tensor([t]), cond)
        return ((pred - z0) ** 2).sum()

    _check_param_slices(
        loss_fn,
        dit,
        slices=(
            "blocks.0.attn.in_proj_weight",
            "blocks.0.norm1.mod",
            "blocks.1.ff.0",
            "head",
            "step_embed.proj.0",
        ),
    )
