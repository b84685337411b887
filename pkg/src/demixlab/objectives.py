"""Training criteria: Gaussian reconstruction likelihoods, the timbre KL
term, the mixture-prior pull between the mixture embedding and the summed
source latents, pitch supervision, the diagonal cross-correlation loss, and
the configurable pitch priors. `assemble_loss` combines reported terms with
unit weights; ablation flags drop terms one at a time."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import MLPStack, PitchTranslator
from .errors import ConfigError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)
BT_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class LossConfig:
    sigma_m: float = 0.25  # mixture-prior std
    sigma_nu: float = 0.5  # pitch-prior std
    recon_variance: float = 1.0
    prior_kind: str = "none"  # none | fac | rich
    K: int = 10  # mixture components of the rich prior
    use_bt: bool = True
    use_kld: bool = True
    use_sb: bool = True  # routed to the encoder, not a loss term
    use_bce: bool = True

    def __post_init__(self):
        if min(self.sigma_m, self.sigma_nu, self.recon_variance) <= 0:
            raise ConfigError("stds and variances must be positive")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.prior_kind not in ("none", "fac", "rich"):
            raise ConfigError(f"unknown prior kind {self.prior_kind!r}")


@dataclass
class LossReport:
    total: float
    recon_mixture: float = 0.0
    recon_source: float = 0.0
    kld_tau: float = 0.0
    pitch_prior_logprob: float = 0.0
    mixture_prior: float = 0.0
    bce: float = 0.0
    bt: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def gaussian_loglik(target: torch.Tensor, mean: torch.Tensor, variance: float) -> torch.Tensor:
    """Sum over all cells of log N(target; mean, variance)."""
    if target.shape != mean.shape:
        raise ShapeError(f"target {tuple(target.shape)} vs mean {tuple(mean.shape)}")
    if variance <= 0:
        raise ConfigError("variance must be positive")
    diff = target - mean
    n = target.numel()
    return -0.5 * ((diff * diff).sum() / variance + n * (LOG_2PI + math.log(variance)))


def gaussian_loglik_rows(target: torch.Tensor, mean: torch.Tensor, variance: float) -> torch.Tensor:
    """Per-row log-likelihood: sums over all dims except the first."""
    if target.shape != mean.shape:
        raise ShapeError(f"target {tuple(target.shape)} vs mean {tuple(mean.shape)}")
    diff = (target - mean).reshape(target.shape[0], -1)
    d = diff.shape[1]
    return -0.5 * ((diff * diff).sum(dim=1) / variance + d * (LOG_2PI + math.log(variance)))


def gaussian_kld(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over the last axis."""
    if torch.any(sigma <= 0):
        raise ConfigError("sigma must be strictly positive")
    return 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * torch.log(sigma)).sum(dim=-1)


def mixture_prior_term(e_m: torch.Tensor, bundles, sigma_m: float = 0.25) -> torch.Tensor:
    """log N(e_m; sum_i s_i, sigma_m^2 I) for vector-mode bundles."""
    if isinstance(bundles, torch.Tensor):
        s_sum = bundles
    else:
        s_sum = torch.stack([b.s for b in bundles]).sum(dim=0)
    if s_sum.shape != e_m.shape:
        raise ShapeError(
            f"mixture embedding {tuple(e_m.shape)} vs summed latents {tuple(s_sum.shape)}"
        )
    return gaussian_loglik(e_m, s_sum, sigma_m**2)


def pitch_bce(y_logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over elements of BCE(Sigmoid(y_logits), y)."""
    if y_logits.shape != y.shape:
        raise ShapeError(f"logits {tuple(y_logits.shape)} vs targets {tuple(y.shape)}")
    return F.binary_cross_entropy_with_logits(y_logits, y, reduction="mean")


def barlow_twins(e_q_batch: torch.Tensor, tau_batch: torch.Tensor) -> torch.Tensor:
    """Sum over sources and features of (1 - C_dd)^2 where C_dd is the
    batch cross-correlation between standardised e_q and tau features.

    Inputs are [B, N_s, D] (or [B, D] for a single pooled source group);
    higher-rank latents are flattened to feature vectors first.
    """
    if e_q_batch.dim() == 2:
        e_q_batch = e_q_batch.unsqueeze(1)
    if tau_batch.dim() == 2:
        tau_batch = tau_batch.unsqueeze(1)
    if e_q_batch.dim() > 3:
        e_q_batch = e_q_batch.reshape(e_q_batch.shape[0], e_q_batch.shape[1], -1)
    if tau_batch.dim() > 3:
        tau_batch = tau_batch.reshape(tau_batch.shape[0], tau_batch.shape[1], -1)
    if e_q_batch.shape != tau_batch.shape:
        raise ShapeError(
            f"query batch {tuple(e_q_batch.shape)} vs timbre batch {tuple(tau_batch.shape)}"
        )
    b = e_q_batch.shape[0]
    if b < 2:
        raise ConfigError("cross-correlation needs a batch of at least 2")

    def standardise(x):
        mean = x.mean(dim=0, keepdim=True)
        std = x.std(dim=0, unbiased=False, keepdim=True).clamp_min(BT_STD_FLOOR)
        return (x - mean) / std

    zq = standardise(e_q_batch)
    zt = standardise(tau_batch)
    c_dd = (zq * zt).mean(dim=0)  # [N_s, D]
    return ((1.0 - c_dd) ** 2).sum()


class PitchPriorFac(nn.Module):
    """Gaussian prior over the pitch latent given its annotation; the mean
    reuses the encoder's pitch translator followed by an MLP head."""

    def __init__(self, translator: PitchTranslator, latent_dim: int = 64,
                 width: int = 256, depth: int = 6, sigma_nu: float = 0.5):
        super().__init__()
        self.translator = translator
        self.trunk = MLPStack(latent_dim, width, depth)
        self.head = nn.Linear(width, latent_dim)
        self.sigma_nu = sigma_nu

    def mean(self, y: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(self.translator(y)))

    def log_prob(self, nu_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        mu = self.mean(y)
        if nu_hat.dim() == 1:
            return gaussian_loglik(nu_hat, mu, self.sigma_nu**2)
        return gaussian_loglik_rows(nu_hat, mu, self.sigma_nu**2)


class PostNormBlock(nn.Module):
    """Self-attention and feedforward, each followed by skip + LayerNorm."""

    def __init__(self, dim: int = 64, heads: int = 4, ff_dim: int = 64):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.ReLU(), nn.Linear(ff_dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):
        a, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + a)
        return self.norm2(x + self.ff(x))


class PitchPriorRich(nn.Module):
    """Gaussian-mixture prior conditioned on the other sources' annotations.

    Tokens pass through a post-norm transformer without positional encodings
    and are max-pooled, so the set is order-free; tokens are additionally
    sorted canonically so the output is bit-identical under permutation.
    """

    def __init__(self, translator: PitchTranslator, latent_dim: int = 64, K: int = 10,
                 blocks: int = 3, heads: int = 4, sigma_nu: float = 0.5):
        super().__init__()
        self.translator = translator
        self.blocks = nn.ModuleList(PostNormBlock(latent_dim, heads, latent_dim) for _ in range(blocks))
        self.mean_heads = nn.Linear(latent_dim, K * latent_dim)
        self.pi_logits = nn.Parameter(torch.zeros(K))
        self.K = K
        self.latent_dim = latent_dim
        self.sigma_nu = sigma_nu

    def component_means(self, annotations: list[torch.Tensor]) -> torch.Tensor:
        if not annotations:
            raise ConfigError("rich prior needs at least one other-source annotation")
        order = sorted(range(len(annotations)), key=lambda j: annotations[j].flatten().tolist())
        tokens = torch.stack([self.translator(annotations[j]) for j in order]).unsqueeze(0)
        x = tokens
        for block in self.blocks:
            x = block(x)
        pooled = x.max(dim=1).values.squeeze(0)
        return self.mean_heads(pooled).reshape(self.K, self.latent_dim)

    def log_prob(self, nu_hat: torch.Tensor, annotations: list[torch.Tensor]) -> torch.Tensor:
        mus = self.component_means(annotations)
        logliks = gaussian_loglik_rows(
            nu_hat.unsqueeze(0).expand(self.K, -1), mus, self.sigma_nu**2
        )
        return torch.logsumexp(F.log_softmax(self.pi_logits, dim=0) + logliks, dim=0)


def assemble_loss(terms: dict[str, torch.Tensor | None], config: LossConfig) -> tuple[torch.Tensor, LossReport]:
    """Unit-weight combination: minimise
    -(recon_mixture + recon_source + mixture_prior + pitch_prior) + kld + bce + bt.
    """

    def need(name: str, flag: bool):
        val = terms.get(name)
        if flag and val is None:
            raise ConfigError(f"loss flag requires term {name!r} but it was not provided")
        return val if flag else None

    recon_mixture = terms.get("recon_mixture")
    recon_source = terms.get("recon_source")
    mixture_prior = terms.get("mixture_prior")
    pitch_prior = need("pitch_prior_logprob", config.prior_kind != "none")
    kld = need("kld_tau", config.use_kld)
    bce = need("bce", config.use_bce)
    bt = need("bt", config.use_bt)

    def opt(v):
        # combine in float64 so the reported-term identity is exact
        return torch.zeros((), dtype=torch.float64) if v is None else v.double()

    total = (
        -(opt(recon_mixture) + opt(recon_source) + opt(mixture_prior) + opt(pitch_prior))
        + opt(kld)
        + opt(bce)
        + opt(bt)
    )
    def val(v):
        return float(opt(v).detach())

    report = LossReport(
        total=float(total.detach()),
        recon_mixture=val(recon_mixture),
        recon_source=val(recon_source),
        kld_tau=val(kld),
        pitch_prior_logprob=val(pitch_prior),
        mixture_prior=val(mixture_prior),
        bce=val(bce),
        bt=val(bt),
    )
    return total, report


# ---------------------------------------------------------------------------
# Evidence-bound assembly: the set-level evaluation and the per-source
# three-term form are the same quantity; both are provided so the identity
# can be checked term by term on real batches.


def elbo_terms(
    x: torch.Tensor,
    x_mean: torch.Tensor,
    recon_variance: float,
    tau_mu: torch.Tensor,
    tau_sigma: torch.Tensor,
    nu_hat: torch.Tensor,
    prior_mu: torch.Tensor,
    sigma_nu: float,
) -> dict[str, torch.Tensor]:
    """Three-term form: per-source KL and prior terms summed explicitly."""
    recon = gaussian_loglik(x, x_mean, recon_variance)
    kld = torch.stack(
        [gaussian_kld(tau_mu[i].reshape(-1), tau_sigma[i].reshape(-1)) for i in range(tau_mu.shape[0])]
    ).sum()
    pitch = torch.stack(
        [
            gaussian_loglik(nu_hat[i], prior_mu[i], sigma_nu**2)
            for i in range(nu_hat.shape[0])
        ]
    ).sum()
    return {"recon": recon, "kld": kld, "pitch_prior": pitch, "elbo": recon - kld + pitch}


def elbo_terms_setwise(
    x: torch.Tensor,
    x_mean: torch.Tensor,
    recon_variance: float,
    tau_mu: torch.Tensor,
    tau_sigma: torch.Tensor,
    nu_hat: torch.Tensor,
    prior_mu: torch.Tensor,
    sigma_nu: float,
) -> dict[str, torch.Tensor]:
    """Set-level evaluation: one KL over the joint factorised posterior and
    one log-density over the stacked pitch latents (the delta posterior turns
    the pitch KL into a prior log-density at the translated binarised logits)."""
    recon = gaussian_loglik(x, x_mean, recon_variance)
    kld = gaussian_kld(tau_mu.reshape(-1), tau_sigma.reshape(-1))
    pitch = gaussian_loglik(nu_hat, prior_mu, sigma_nu**2)
    return {"recon": recon, "kld": kld, "pitch_prior": pitch, "elbo": recon - kld + pitch}
