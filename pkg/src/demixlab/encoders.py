"""Mixture/query encoders and the per-source pitch & timbre posteriors.

Vector mode: one 64-dim embedding per mel segment; pitch logits are a single
multi-hot transcription; pitch and timbre fuse through FiLM.

Grid mode: embeddings are channels x time x feature grids (8 x 100 x 16 by
default) produced by the toy latent autoencoder's architecture; pitch logits
are framewise (129 x 400); fusion is concatenation along the feature axis
after broadcasting the time-invariant timbre latent.

Each source's latents depend only on the mixture and its own query, so
sources are encoded independently and in query order.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "vector"  # "vector" | "grid"
    # vector mode
    mel_bands: int = 128
    frames: int = 10
    embed_dim: int = 64
    conv_width: int = 768
    mlp_width: int = 256
    mlp_depth: int = 6
    n_pitches: int = 52
    latent_dim: int = 64
    # grid mode
    grid_channels: int = 8
    grid_time: int = 100
    grid_feat: int = 16
    pitch_frames: int = 400
    grid_mel_bands: int = 64
    grid_mel_frames: int = 400
    ae_width: int = 32
    head_width: int = 128
    # shared
    eval_threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in ("vector", "grid"):
            raise ConfigError(f"unknown encoder mode {self.mode!r}")
        if min(self.embed_dim, self.latent_dim, self.n_pitches) <= 0:
            raise ConfigError("encoder dims must be positive")


def vector_encoder_config(**overrides) -> EncoderConfig:
    return EncoderConfig(mode="vector", **overrides)


def grid_encoder_config(**overrides) -> EncoderConfig:
    overrides.setdefault("n_pitches", 129)
    return EncoderConfig(mode="grid", **overrides)


@dataclass
class SourceLatentBundle:
    nu: torch.Tensor  # pitch latent: [64] or [8, 100, 16]
    tau: torch.Tensor  # timbre latent: [64] or [8, 1, 16]
    tau_mu: torch.Tensor
    tau_sigma: torch.Tensor
    s: torch.Tensor  # fused: [64] or [8, 100, 32]
    y_bin: torch.Tensor  # binarised logits (sigmoid probs when SB is ablated)
    y_logits: torch.Tensor


def stochastic_binarise(
    y_hat: torch.Tensor,
    phase: str,
    rng: torch.Generator | None = None,
    eval_threshold: float = 0.5,
) -> torch.Tensor:
    """Threshold Sigmoid(y_hat) against one shared uniform draw per call
    (train) or a fixed threshold (eval). Backward pass is the identity."""
    if phase == "train":
        h = torch.rand((), generator=rng, dtype=y_hat.dtype, device=y_hat.device)
    elif phase == "eval":
        h = torch.tensor(eval_threshold, dtype=y_hat.dtype, device=y_hat.device)
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    hard = (torch.sigmoid(y_hat) > h).to(y_hat.dtype)
    # forward value is exactly `hard`; gradient flows 1:1 into y_hat
    return hard + y_hat - y_hat.detach()


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of [B, C, T] conv activations."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ConvEmbedder(nn.Module):
    """Mel [B, bands, T] -> [B, out_dim] via a conv stack and temporal mean-pooling."""

    def __init__(self, bands: int, width: int, out_dim: int):
        super().__init__()
        specs = [
            (bands, width, 3, 1, 0),
            (width, width, 3, 1, 1),
            (width, width, 4, 2, 1),
            (width, width, 3, 1, 1),
            (width, width, 3, 1, 1),
        ]
        layers = []
        for cin, cout, k, s, p in specs:
            layers += [nn.Conv1d(cin, cout, k, stride=s, padding=p), ChannelLayerNorm(cout), nn.ReLU()]
        layers.append(nn.Conv1d(width, out_dim, 1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).mean(dim=2)


class MLPStack(nn.Module):
    def __init__(self, in_dim: int, width: int, depth: int):
        super().__init__()
        layers = []
        d = in_dim
        for _ in range(depth):
            layers += [nn.Linear(d, width), nn.LayerNorm(width), nn.ReLU()]
            d = width
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class PitchTranslator(nn.Module):
    """Deterministic map from binarised pitch activations to the pitch latent."""

    def __init__(self, n_pitches: int, latent_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(n_pitches, latent_dim),
            nn.ReLU(),
            nn.Linear(latent_dim, latent_dim),
            nn.ReLU(),
            nn.Linear(latent_dim, latent_dim),
        )

    def forward(self, y_bin):
        return self.net(y_bin)


class GaussianHead(nn.Module):
    """Projects features to (mu, sigma) with softplus-floored sigma."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.mu = nn.Linear(in_dim, out_dim)
        self.raw_sigma = nn.Linear(in_dim, out_dim)

    def forward(self, h):
        return self.mu(h), F.softplus(self.raw_sigma(h)) + SIGMA_FLOOR


def reparameterise(
    mu: torch.Tensor,
    sigma: torch.Tensor,
    phase: str,
    rng: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """mu + eps * sigma in train phase; posterior mean at eval."""
    if phase == "eval":
        return mu
    if eps is None:
        eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
    return mu + eps * sigma


class FilmFuse(nn.Module):
    """s = alpha(tau) * nu + beta(tau), with linear alpha and beta."""

    def __init__(self, latent_dim: int):
        super().__init__()
        self.alpha = nn.Linear(latent_dim, latent_dim)
        self.beta = nn.Linear(latent_dim, latent_dim)

    def forward(self, tau, nu):
        return self.alpha(tau) * nu + self.beta(tau)


# ---------------------------------------------------------------------------
# grid-mode building blocks (shared with the latent autoencoder)


class GridEncoder(nn.Module):
    """Mel [B, bands, T] -> latent grid [B, C, T/4, bands/4]."""

    def __init__(self, width: int = 32, channels: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, width, 3, stride=2, padding=1),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv2d(width, channels, 3, padding=1),
        )

    def forward(self, x):
        z = self.net(x.unsqueeze(1))  # [B, C, bands/4, T/4]
        return z.permute(0, 1, 3, 2)  # [B, C, T/4, bands/4] = (C, T, D)


class GridDecoder(nn.Module):
    def __init__(self, width: int = 32, channels: int = 8):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv2d(width, 1, 3, padding=1),
        )

    def forward(self, z):
        x = self.net(z.permute(0, 1, 3, 2))
        return x.squeeze(1)  # [B, bands, T]


class GridFuse(nn.Module):
    """Broadcast the query embedding over time, concatenate along the feature
    axis, and project back to the original feature size with a 1x1 conv."""

    def __init__(self, feat: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * feat, feat, 1)

    def forward(self, e_m, e_q):
        if e_m.shape[-1] != e_q.shape[-1] or e_m.shape[1] != e_q.shape[1]:
            raise ShapeError(f"mixture/query grids disagree: {tuple(e_m.shape)} vs {tuple(e_q.shape)}")
        q = e_q.expand(-1, -1, e_m.shape[2], -1)
        x = torch.cat([e_m, q], dim=3)  # [B, C, T, 2D]
        x = x.permute(0, 3, 1, 2)  # feature axis as conv channels
        return self.proj(x).permute(0, 2, 3, 1)


class GridTranscriber(nn.Module):
    """Latent grid [B, C, T, D] -> framewise pitch logits [B, n_pitches, 4T]."""

    def __init__(self, channels: int, feat: int, n_pitches: int, width: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.ConvTranspose1d(channels * feat, width, 4, stride=2, padding=1),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.ConvTranspose1d(width, width, 4, stride=2, padding=1),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, n_pitches, 3, padding=1),
        )

    def forward(self, ctx):
        b, c, t, d = ctx.shape
        x = ctx.permute(0, 1, 3, 2).reshape(b, c * d, t)
        return self.net(x)


class GridTranslator(nn.Module):
    """Framewise binarised logits [B, n_pitches, T_p] -> pitch latent grid."""

    def __init__(self, channels: int, feat: int, n_pitches: int, width: int = 128):
        super().__init__()
        self.channels, self.feat = channels, feat
        self.net = nn.Sequential(
            nn.Conv1d(n_pitches, width, 5, stride=2, padding=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, width, 5, stride=2, padding=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, channels * feat, 3, padding=1),
        )

    def forward(self, y_bin):
        x = self.net(y_bin)  # [B, C*D, T]
        b, _, t = x.shape
        return x.reshape(b, self.channels, self.feat, t).permute(0, 1, 3, 2)


class GridTimbreEncoder(nn.Module):
    """Fused grid -> time-invariant Gaussian posterior over [C, 1, D]."""

    def __init__(self, channels: int, feat: int, width: int = 128):
        super().__init__()
        self.channels, self.feat = channels, feat
        cin = channels * feat
        self.net = nn.Sequential(
            nn.Conv1d(cin, width, 5, stride=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, width, 5, stride=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, width, 5, stride=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, 2 * cin, 1),
        )

    def forward(self, ctx):
        b, c, t, d = ctx.shape
        x = ctx.permute(0, 1, 3, 2).reshape(b, c * d, t)
        h = self.net(x).mean(dim=2)  # [B, 2*C*D]
        mu, raw = h.chunk(2, dim=1)
        sigma = F.softplus(raw) + SIGMA_FLOOR
        shape = (b, self.channels, 1, self.feat)
        return mu.reshape(shape), sigma.reshape(shape)


def concat_fuse(tau: torch.Tensor, nu: torch.Tensor) -> torch.Tensor:
    """[B, C, 1, D] timbre + [B, C, T, D] pitch -> [B, C, T, 2D], pitch first."""
    if tau.shape[-1] != nu.shape[-1] or tau.shape[-3] != nu.shape[-3]:
        raise ShapeError(f"cannot fuse tau {tuple(tau.shape)} with nu {tuple(nu.shape)}")
    t = nu.shape[-2]
    return torch.cat([nu, tau.expand(*tau.shape[:-2], t, tau.shape[-1])], dim=-1)


# ---------------------------------------------------------------------------


class SourceEncoder(nn.Module):
    """Full per-source inference pipeline for either mode.

    Grid mode borrows the mixture embedding from a latent autoencoder
    (typically pretrained and frozen by the trainer) and trains the query,
    pitch, and timbre paths from scratch.
    """

    def __init__(self, config: EncoderConfig, latent_ae: nn.Module | None = None):
        super().__init__()
        self.config = config
        if config.mode == "vector":
            self.mixture_embedder = ConvEmbedder(config.mel_bands, config.conv_width, config.embed_dim)
            self.query_embedder = ConvEmbedder(config.mel_bands, config.conv_width, config.embed_dim)
            self.transcriber = nn.Sequential(
                MLPStack(2 * config.embed_dim, config.mlp_width, config.mlp_depth),
                nn.Linear(config.mlp_width, config.n_pitches),
            )
            self.pitch_translator = PitchTranslator(config.n_pitches, config.latent_dim)
            self.timbre_trunk = MLPStack(2 * config.embed_dim, config.mlp_width, config.mlp_depth)
            self.timbre_head = GaussianHead(config.mlp_width, config.latent_dim)
            self.film = FilmFuse(config.latent_dim)
        else:
            if latent_ae is None:
                raise ConfigError("grid mode requires a latent autoencoder")
            self.latent_ae = latent_ae
            self.query_embedder = GridEncoder(config.ae_width, config.grid_channels)
            self.grid_fuse = GridFuse(config.grid_feat)
            self.transcriber = GridTranscriber(
                config.grid_channels, config.grid_feat, config.n_pitches, config.head_width
            )
            self.pitch_translator = GridTranslator(
                config.grid_channels, config.grid_feat, config.n_pitches, config.head_width
            )
            self.grid_timbre = GridTimbreEncoder(
                config.grid_channels, config.grid_feat, config.head_width
            )

    # -- single/batch plumbing ------------------------------------------------

    def _batched(self, x: torch.Tensor, single_ndim: int) -> tuple[torch.Tensor, bool]:
        if x.dim() == single_ndim:
            return x.unsqueeze(0), True
        if x.dim() == single_ndim + 1:
            return x, False
        raise ShapeError(f"expected {single_ndim}- or {single_ndim + 1}-D input, got {x.dim()}-D")

    def _check_mel(self, x: torch.Tensor) -> None:
        cfg = self.config
        bands = cfg.mel_bands if cfg.mode == "vector" else cfg.grid_mel_bands
        frames = cfg.frames if cfg.mode == "vector" else cfg.grid_mel_frames
        if x.shape[-2] != bands or x.shape[-1] != frames:
            raise ShapeError(
                f"mel shape {tuple(x.shape[-2:])} does not match configured {bands}x{frames}"
            )

    # -- ops --------------------------------------------------------------------

    def encode_mixture(self, x_m: torch.Tensor) -> torch.Tensor:
        self._check_mel(x_m)
        x, single = self._batched(x_m, 2)
        if self.config.mode == "vector":
            out = self.mixture_embedder(x)
        else:
            out = self.latent_ae.encode(x)
        return out.squeeze(0) if single else out

    def encode_query(self, x_q: torch.Tensor) -> torch.Tensor:
        self._check_mel(x_q)
        x, single = self._batched(x_q, 2)
        if self.config.mode == "vector":
            out = self.query_embedder(x)
        else:
            out = self.query_embedder(x).mean(dim=2, keepdim=True)  # [B, C, 1, D]
        return out.squeeze(0) if single else out

    def fuse_context(self, e_m: torch.Tensor, e_q: torch.Tensor) -> torch.Tensor:
        if self.config.mode == "vector":
            if e_m.shape[-1] != e_q.shape[-1]:
                raise ShapeError("mixture/query embedding dims differ")
            return torch.cat([e_m, e_q], dim=-1)
        m, single = self._batched(e_m, 3)
        q, _ = self._batched(e_q, 3)
        out = self.grid_fuse(m, q)
        return out.squeeze(0) if single else out

    def transcribe(self, context: torch.Tensor) -> torch.Tensor:
        if self.config.mode == "vector":
            return self.transcriber(context)
        x, single = self._batched(context, 3)
        out = self.transcriber(x)
        return out.squeeze(0) if single else out

    def translate_pitch(self, y_bin: torch.Tensor) -> torch.Tensor:
        if not torch.all((y_bin == 0) | (y_bin == 1)):
            raise ConfigError("translate_pitch expects binary input")
        return self._translate(y_bin)

    def _translate(self, y: torch.Tensor) -> torch.Tensor:
        if self.config.mode == "vector":
            return self.pitch_translator(y)
        x, single = self._batched(y, 2)
        out = self.pitch_translator(x)
        return out.squeeze(0) if single else out

    def encode_timbre(
        self,
        context: torch.Tensor,
        phase: str = "eval",
        rng: torch.Generator | None = None,
        eps: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if self.config.mode == "vector":
            h = self.timbre_trunk(context)
            mu, sigma = self.timbre_head(h)
        else:
            x, single = self._batched(context, 3)
            mu, sigma = self.grid_timbre(x)
            if single:
                mu, sigma = mu.squeeze(0), sigma.squeeze(0)
        tau = reparameterise(mu, sigma, phase, rng, eps)
        return mu, sigma, tau

    def fuse_latents(self, tau: torch.Tensor, nu: torch.Tensor) -> torch.Tensor:
        if self.config.mode == "vector":
            return self.film_fuse(tau, nu)
        return concat_fuse(tau, nu)

    def film_fuse(self, tau: torch.Tensor, nu: torch.Tensor) -> torch.Tensor:
        if self.config.mode != "vector":
            raise ConfigError("film_fuse is a vector-mode operation")
        return self.film(tau, nu)

    def encode_source(
        self,
        e_m: torch.Tensor,
        x_q: torch.Tensor,
        phase: str = "eval",
        rng: torch.Generator | None = None,
        use_sb: bool = True,
    ) -> SourceLatentBundle:
        e_q = self.encode_query(x_q)
        ctx = self.fuse_context(e_m, e_q)
        y_logits = self.transcribe(ctx)
        if use_sb:
            y_bin = stochastic_binarise(y_logits, phase, rng, self.config.eval_threshold)
            nu = self._translate(y_bin)
        else:  # capacity-constraint ablation: feed raw probabilities through
            y_bin = torch.sigmoid(y_logits)
            nu = self._translate(y_bin)
        tau_mu, tau_sigma, tau = self.encode_timbre(ctx, phase, rng)
        s = self.fuse_latents(tau, nu)
        return SourceLatentBundle(
            nu=nu, tau=tau, tau_mu=tau_mu, tau_sigma=tau_sigma, s=s, y_bin=y_bin, y_logits=y_logits
        )

    def encode_sources(
        self,
        x_m: torch.Tensor,
        queries: list[torch.Tensor],
        phase: str = "eval",
        rng: torch.Generator | None = None,
        use_sb: bool = True,
    ) -> list[SourceLatentBundle]:
        """Apply the factorised per-source pipeline independently per query."""
        if not queries:
            raise ConfigError("encode_sources requires at least one query")
        e_m = self.encode_mixture(x_m)
        return [self.encode_source(e_m, q, phase, rng, use_sb) for q in queries]
