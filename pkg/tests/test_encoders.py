import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from demixlab.encoders import (
    EncoderConfig,
    SourceEncoder,
    concat_fuse,
    grid_encoder_config,
    reparameterise,
    stochastic_binarise,
)
from demixlab.errors import ConfigError, ShapeError
from demixlab.ldm import LatentAutoencoder

SMALL = dict(conv_width=32, mlp_width=32, mlp_depth=2)


@pytest.fixture(scope="module")
def vec_encoder():
    torch.manual_seed(0)
    return SourceEncoder(EncoderConfig(**SMALL)).eval()


@pytest.fixture(scope="module")
def grid_encoder():
    torch.manual_seed(0)
    ae = LatentAutoencoder(width=16)
    return SourceEncoder(grid_encoder_config(ae_width=16, head_width=32), latent_ae=ae).eval()


# --- stochastic binarisation -------------------------------------------------


def test_sb_boundary_zero_logit():
    # sigmoid(0) = 0.5 is not > 0.5, so the eval output is 0
    out = stochastic_binarise(torch.tensor([0.0]), "eval")
    assert out.item() == 0.0


def test_sb_large_logit():
    out = stochastic_binarise(torch.tensor([4.0]), "eval")
    assert out.item() == 1.0


def test_sb_monte_carlo_expectation(torch_rng):
    logits = torch.tensor([1.0, 0.0, -2.0, 4.0])
    total = torch.zeros(4)
    n = 100_000
    for _ in range(n):
        total += stochastic_binarise(logits, "train", torch_rng)
    mean = total / n
    # P(out = 1) = P(h < sigmoid(y)) = sigmoid(y) under h ~ U(0,1)
    assert abs(mean[0].item() - torch.sigmoid(torch.tensor(1.0)).item()) < 0.005
    np.testing.assert_allclose(mean.numpy(), torch.sigmoid(logits).numpy(), atol=0.01)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=16), st.integers(0, 2**31 - 1))
def test_sb_outputs_binary(values, seed):
    rng = torch.Generator().manual_seed(seed)
    out = stochastic_binarise(torch.tensor(values), "train", rng)
    assert set(torch.unique(out).tolist()) <= {0.0, 1.0}


def test_sb_straight_through_gradient_identity(torch_rng):
    y = torch.randn(16, generator=torch_rng, requires_grad=True)
    out = stochastic_binarise(y, "train", torch_rng)
    g = torch.randn(16, generator=torch_rng)
    out.backward(g)
    assert torch.equal(y.grad, g)


def test_sb_shared_threshold_per_call():
    # with one shared h, entries with equal logits always agree
    rng = torch.Generator().manual_seed(0)
    for _ in range(200):
        out = stochastic_binarise(torch.tensor([0.3, 0.3, 0.3]), "train", rng)
        assert out.min() == out.max()


# --- reparameterised timbre posterior ----------------------------------------


def test_sigma_strictly_positive(vec_encoder, torch_rng):
    ctx = torch.randn(64, 128, generator=torch_rng)
    _, sigma, _ = vec_encoder.encode_timbre(ctx, phase="eval")
    assert torch.all(sigma > 0)


def test_reparam_moments(torch_rng):
    mu = torch.tensor([0.5, -1.0])
    sigma = torch.tensor([0.3, 1.5])
    n = 10_000
    samples = torch.stack(
        [reparameterise(mu, sigma, "train", torch_rng) for _ in range(n)]
    )
    se_mean = sigma / np.sqrt(n)
    se_var = sigma**2 * np.sqrt(2.0 / (n - 1))
    assert torch.all((samples.mean(0) - mu).abs() < 3 * se_mean)
    assert torch.all((samples.var(0) - sigma**2).abs() < 3 * se_var)


def test_reparam_eval_returns_mean():
    mu = torch.randn(8)
    sigma = torch.rand(8) + 0.1
    assert torch.equal(reparameterise(mu, sigma, "eval"), mu)


def test_reparam_finite_difference_gradients():
    # fixed noise, float64: autodiff through mu and the sigma pre-activation
    torch.manual_seed(3)
    mu = torch.randn(6, dtype=torch.float64, requires_grad=True)
    raw = torch.randn(6, dtype=torch.float64, requires_grad=True)
    eps = torch.randn(6, dtype=torch.float64)
    w = torch.randn(6, dtype=torch.float64)

    def f(mu_t, raw_t):
        sigma = F.softplus(raw_t) + 1e-4
        tau = mu_t + eps * sigma
        return torch.sin(tau * w).sum()

    loss = f(mu, raw)
    loss.backward()
    h = 1e-6
    for leaf in (mu, raw):
        fd = torch.zeros_like(leaf)
        for i in range(leaf.numel()):
            delta = torch.zeros_like(leaf)
            delta[i] = h
            if leaf is mu:
                hi, lo = f(mu.detach() + delta, raw.detach()), f(mu.detach() - delta, raw.detach())
            else:
                hi, lo = f(mu.detach(), raw.detach() + delta), f(mu.detach(), raw.detach() - delta)
            fd[i] = (hi - lo) / (2 * h)
        rel = (leaf.grad - fd).abs() / fd.abs().clamp_min(1e-8)
        assert rel.max().item() < 1e-4


# --- shapes and determinism ---------------------------------------------------


def test_vector_shapes(vec_encoder, torch_rng):
    mel = torch.randn(128, 10, generator=torch_rng)
    assert vec_encoder.encode_mixture(mel).shape == (64,)
    assert vec_encoder.encode_query(mel).shape == (64,)
    ctx = vec_encoder.fuse_context(
        vec_encoder.encode_mixture(mel), vec_encoder.encode_query(mel)
    )
    assert ctx.shape == (128,)
    assert vec_encoder.transcribe(ctx).shape == (52,)
    nu = vec_encoder.translate_pitch(torch.zeros(52))
    assert nu.shape == (64,)


def test_grid_shapes(grid_encoder, torch_rng):
    mel = torch.randn(64, 400, generator=torch_rng)
    e_m = grid_encoder.encode_mixture(mel)
    assert e_m.shape == (8, 100, 16)
    e_q = grid_encoder.encode_query(mel)
    assert e_q.shape == (8, 1, 16)
    ctx = grid_encoder.fuse_context(e_m, e_q)
    assert ctx.shape == (8, 100, 16)
    logits = grid_encoder.transcribe(ctx)
    assert logits.shape == (129, 400)
    nu = grid_encoder.translate_pitch(torch.zeros(129, 400))
    assert nu.shape == (8, 100, 16)
    mu, sigma, tau = grid_encoder.encode_timbre(ctx, phase="eval")
    assert tau.shape == (8, 1, 16) and torch.all(sigma > 0)
    bundle = grid_encoder.encode_sources(mel, [mel], phase="eval")[0]
    assert bundle.s.shape == (8, 100, 32)


def test_encoder_determinism(vec_encoder, torch_rng):
    mel = torch.randn(128, 10, generator=torch_rng)
    assert torch.equal(vec_encoder.encode_mixture(mel), vec_encoder.encode_mixture(mel))
    assert torch.equal(vec_encoder.encode_query(mel), vec_encoder.encode_query(mel))


def test_shape_mismatch_rejected(vec_encoder):
    with pytest.raises(ShapeError):
        vec_encoder.encode_mixture(torch.zeros(64, 400))


def test_translate_rejects_non_binary(vec_encoder):
    with pytest.raises(ConfigError, match="binary"):
        vec_encoder.translate_pitch(torch.full((52,), 0.5))


def test_translate_deterministic(vec_encoder):
    y = (torch.arange(52) % 2).float()
    assert torch.equal(vec_encoder.translate_pitch(y), vec_encoder.translate_pitch(y))


# --- FiLM and concatenation fusion -------------------------------------------


def _forced_film(alpha_w, alpha_b, beta_w, beta_b, dim):
    from demixlab.encoders import FilmFuse

    film = FilmFuse(dim)
    with torch.no_grad():
        film.alpha.weight.copy_(alpha_w)
        film.alpha.bias.copy_(alpha_b)
        film.beta.weight.copy_(beta_w)
        film.beta.bias.copy_(beta_b)
    return film


def test_film_identity_modulation(torch_rng):
    dim = 8
    film = _forced_film(torch.zeros(dim, dim), torch.ones(dim), torch.zeros(dim, dim), torch.zeros(dim), dim)
    nu = torch.randn(dim, generator=torch_rng)
    tau = torch.randn(dim, generator=torch_rng)
    assert torch.equal(film(tau, nu), nu)


def test_film_zero_pitch_gives_shift(torch_rng):
    from demixlab.encoders import FilmFuse

    torch.manual_seed(1)
    film = FilmFuse(8)
    tau = torch.randn(8, generator=torch_rng)
    out = film(tau, torch.zeros(8))
    assert torch.allclose(out, film.beta(tau))


def test_film_hand_case():
    film = _forced_film(
        torch.zeros(2, 2), torch.tensor([2.0, 3.0]), torch.zeros(2, 2), torch.tensor([1.0, -1.0]), 2
    )
    s = film(torch.zeros(2), torch.ones(2))
    np.testing.assert_allclose(s.detach().numpy(), [3.0, 2.0])


def test_concat_fuse_layout(torch_rng):
    nu = torch.randn(8, 100, 16, generator=torch_rng)
    tau = torch.randn(8, 1, 16, generator=torch_rng)
    s = concat_fuse(tau, nu)
    assert s.shape == (8, 100, 32)
    assert torch.equal(s[..., :16], nu)
    assert torch.equal(s[..., 5, 16:], s[..., 77, 16:])


def test_film_mode_error(grid_encoder):
    with pytest.raises(ConfigError):
        grid_encoder.film_fuse(torch.zeros(64), torch.zeros(64))


# --- factorised per-source posterior ------------------------------------------


def test_encode_sources_order_and_independence(vec_encoder, torch_rng):
    mel = torch.randn(128, 10, generator=torch_rng)
    q1 = torch.randn(128, 10, generator=torch_rng)
    q2 = torch.randn(128, 10, generator=torch_rng)
    ab = vec_encoder.encode_sources(mel, [q1, q2], phase="eval")
    ba = vec_encoder.encode_sources(mel, [q2, q1], phase="eval")
    for field in ("nu", "tau", "s", "y_bin"):
        assert torch.equal(getattr(ab[0], field), getattr(ba[1], field))
        assert torch.equal(getattr(ab[1], field), getattr(ba[0], field))


def test_bundle_unaffected_by_other_queries(vec_encoder, torch_rng):
    mel = torch.randn(128, 10, generator=torch_rng)
    q1 = torch.randn(128, 10, generator=torch_rng)
    q2 = torch.randn(128, 10, generator=torch_rng)
    q3 = torch.randn(128, 10, generator=torch_rng)
    a = vec_encoder.encode_sources(mel, [q1, q2], phase="eval")[0]
    b = vec_encoder.encode_sources(mel, [q1, q3], phase="eval")[0]
    for field in ("nu", "tau", "tau_mu", "tau_sigma", "s", "y_bin", "y_logits"):
        assert torch.equal(getattr(a, field), getattr(b, field))


def test_delta_pitch_posterior(vec_encoder, torch_rng):
    mel = torch.randn(128, 10, generator=torch_rng)
    q = torch.randn(128, 10, generator=torch_rng)
    nus = [vec_encoder.encode_sources(mel, [q], phase="eval")[0].nu for _ in range(3)]
    assert torch.equal(nus[0], nus[1]) and torch.equal(nus[1], nus[2])


def test_empty_queries_rejected(vec_encoder, torch_rng):
    with pytest.raises(ConfigError):
        vec_encoder.encode_sources(torch.randn(128, 10, generator=torch_rng), [], phase="eval")


def test_four_grid_bundles(grid_encoder, torch_rng):
    mel = torch.randn(64, 400, generator=torch_rng)
    queries = [torch.randn(64, 400, generator=torch_rng) for _ in range(4)]
    bundles = grid_encoder.encode_sources(mel, queries, phase="eval")
    assert len(bundles) == 4
    for b in bundles:
        assert b.s.shape == (8, 100, 32)
