"""Recurrent mel decoder for the vector-mode system and its trainer.

During training the decoder reconstructs the mixture from the mixture
embedding e_m (plus each source from its fused latent s); the mixture-prior
term pulls sum_i s_i towards e_m so that at evaluation time s_sum (or any
manipulated set of source latents) can be decoded instead.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import objectives, trainutil
from .datagen.store import Dataset
from .encoders import EncoderConfig, SourceEncoder, reparameterise, stochastic_binarise
from .errors import ConfigError, ShapeError
from .objectives import LossConfig, PitchPriorFac, PitchPriorRich
from .trainutil import TrainConfig


@dataclass(frozen=True)
class SimpleDecoderConfig:
    latent_dim: int = 64
    frames: int = 10
    hidden: int = 128
    layers: int = 2
    out_bands: int = 128

    def __post_init__(self):
        if min(self.latent_dim, self.frames, self.hidden, self.layers, self.out_bands) <= 0:
            raise ConfigError("decoder dims must be positive")


class SimpleDecoder(nn.Module):
    """Broadcast a latent over the segment frames, run a bidirectional GRU,
    and project to mel bands."""

    def __init__(self, config: SimpleDecoderConfig | None = None):
        super().__init__()
        self.config = config or SimpleDecoderConfig()
        c = self.config
        self.gru = nn.GRU(
            c.latent_dim, c.hidden, num_layers=c.layers, bidirectional=True, batch_first=True
        )
        self.head = nn.Linear(2 * c.hidden, c.out_bands)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        single = latent.dim() == 1
        x = latent.unsqueeze(0) if single else latent
        if x.shape[-1] != self.config.latent_dim:
            raise ShapeError(f"latent dim {x.shape[-1]} != {self.config.latent_dim}")
        x = x.unsqueeze(1).expand(-1, self.config.frames, -1)
        y, _ = self.gru(x)
        mel = self.head(y).transpose(1, 2)  # [B, bands, frames]
        return mel.squeeze(0) if single else mel

    decode = forward


def render_from_bundles(decoder: SimpleDecoder, bundles, mode: str = "single"):
    """mode 'single': decode each fused latent; mode 'sum': decode their sum."""
    if not bundles:
        raise ConfigError("no bundles to render")
    if mode == "single":
        return [decoder(b.s) for b in bundles]
    if mode == "sum":
        return decoder(torch.stack([b.s for b in bundles]).sum(dim=0))
    raise ConfigError(f"unknown render mode {mode!r}")


def latent_residual_swap(e_m: torch.Tensor, s_i: torch.Tensor, s_i_new: torch.Tensor) -> torch.Tensor:
    """Replace one source inside a mixture embedding: r + s_new with r = e_m - s_i,
    grouped as e_m + (s_new - s_i) so an identity swap returns e_m exactly."""
    if not (e_m.shape == s_i.shape == s_i_new.shape):
        raise ShapeError("residual swap requires matching shapes")
    return e_m + (s_i_new - s_i)


class SimpleSystem(nn.Module):
    """Vector-mode encoders, decoder, and optional pitch prior in one bundle."""

    def __init__(
        self,
        encoder_config: EncoderConfig | None = None,
        decoder_config: SimpleDecoderConfig | None = None,
        loss_config: LossConfig | None = None,
    ):
        super().__init__()
        self.encoder_config = encoder_config or EncoderConfig()
        self.decoder_config = decoder_config or SimpleDecoderConfig(
            latent_dim=self.encoder_config.latent_dim,
            frames=self.encoder_config.frames,
            out_bands=self.encoder_config.mel_bands,
        )
        self.loss_config = loss_config or LossConfig()
        self.encoder = SourceEncoder(self.encoder_config)
        self.decoder = SimpleDecoder(self.decoder_config)
        if self.loss_config.prior_kind == "fac":
            self.pitch_prior = PitchPriorFac(
                self.encoder.pitch_translator,
                self.encoder_config.latent_dim,
                sigma_nu=self.loss_config.sigma_nu,
            )
        elif self.loss_config.prior_kind == "rich":
            self.pitch_prior = PitchPriorRich(
                self.encoder.pitch_translator,
                self.encoder_config.latent_dim,
                K=self.loss_config.K,
                sigma_nu=self.loss_config.sigma_nu,
            )
        else:
            self.pitch_prior = None

    def config_meta(self) -> dict:
        return {
            "encoder": asdict(self.encoder_config),
            "decoder": asdict(self.decoder_config),
            "loss": asdict(self.loss_config),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "SimpleSystem":
        return cls(
            EncoderConfig(**meta["encoder"]),
            SimpleDecoderConfig(**meta["decoder"]),
            LossConfig(**meta["loss"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["SimpleSystem", dict]:
        meta = json.loads(Path(str(path) + ".json").read_text())
        system = cls.from_meta(meta["configs"])
        trainutil.load_checkpoint(path, system)
        system.eval()
        return system, meta


def _batch_tensors(examples, idx, dataset, split, rng):
    """Stack a mixture batch plus the flattened source table with queries."""
    x_m = torch.from_numpy(np.stack([examples[i].mixture_mel for i in idx]))
    owners, x_s, y, queries, insts = [], [], [], [], []
    for row, i in enumerate(idx):
        ex = examples[i]
        for si in range(ex.n_sources):
            owners.append(row)
            x_s.append(ex.source_mels[si])
            y.append(ex.annotations[si])
            insts.append(ex.instrument_ids[si])
            queries.append(dataset.sample_query(ex.instrument_ids[si], split, rng))
    return (
        x_m,
        torch.as_tensor(np.array(owners), dtype=torch.long),
        torch.from_numpy(np.stack(x_s)),
        torch.from_numpy(np.stack(y)),
        torch.from_numpy(np.stack(queries)),
        insts,
    )


def compute_batch_loss(
    system: SimpleSystem,
    dataset: Dataset,
    examples,
    idx,
    split: str,
    query_rng: np.random.Generator,
    torch_rng: torch.Generator | None,
    phase: str,
):
    """Forward pass over one batch; returns (total tensor, LossReport)."""
    cfg = system.loss_config
    x_m, owners, x_s, y, x_q, _ = _batch_tensors(examples, idx, dataset, split, query_rng)
    b = x_m.shape[0]

    enc = system.encoder
    e_m = enc.encode_mixture(x_m)
    e_q = enc.encode_query(x_q)
    ctx = torch.cat([e_m[owners], e_q], dim=-1)
    y_logits = enc.transcribe(ctx)
    if cfg.use_sb:
        y_bin = stochastic_binarise(y_logits, phase, torch_rng, enc.config.eval_threshold)
    else:
        y_bin = torch.sigmoid(y_logits)
    nu = enc.pitch_translator(y_bin)
    h = enc.timbre_trunk(ctx)
    mu, sigma = enc.timbre_head(h)
    tau = reparameterise(mu, sigma, phase, torch_rng)
    s = enc.film(tau, nu)

    recon_mixture = objectives.gaussian_loglik_rows(
        x_m, system.decoder(e_m), cfg.recon_variance
    ).sum() / b
    recon_source = objectives.gaussian_loglik_rows(
        x_s, system.decoder(s), cfg.recon_variance
    ).sum() / b
    s_sum = torch.zeros_like(e_m).index_add_(0, owners, s)
    mixture_prior = objectives.gaussian_loglik_rows(e_m, s_sum, cfg.sigma_m**2).sum() / b
    kld = objectives.gaussian_kld(mu, sigma).sum() / b
    bce = (
        nn.functional.binary_cross_entropy_with_logits(y_logits, y, reduction="none")
        .mean(dim=1)
        .sum()
        / b
    )
    bt = objectives.barlow_twins(e_q.unsqueeze(1), tau.unsqueeze(1))

    pitch_prior = None
    if system.pitch_prior is not None and cfg.prior_kind == "fac":
        pitch_prior = system.pitch_prior.log_prob(nu, y).sum() / b
    elif system.pitch_prior is not None and cfg.prior_kind == "rich":
        terms = []
        start = 0
        for row in range(b):
            n_src = int((owners == row).sum())
            if n_src >= 2:
                for si in range(start, start + n_src):
                    others = [y[j] for j in range(start, start + n_src) if j != si]
                    terms.append(system.pitch_prior.log_prob(nu[si], others))
            start += n_src
        if terms:
            pitch_prior = torch.stack(terms).sum() / b

    total, report = objectives.assemble_loss(
        {
            "recon_mixture": recon_mixture,
            "recon_source": recon_source,
            "mixture_prior": mixture_prior,
            "pitch_prior_logprob": pitch_prior,
            "kld_tau": kld,
            "bce": bce,
            "bt": bt,
        },
        cfg,
    )
    return total, report


def train_simple(
    dataset: Dataset,
    system: SimpleSystem,
    train_config: TrainConfig,
    out_dir: str | Path,
    resume: bool = False,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "simple.ckpt"
    metrics = trainutil.MetricsWriter(out_dir / "metrics.jsonl")

    optimizer = torch.optim.Adam(system.parameters(), lr=train_config.lr)
    start_step = 0
    if resume and ckpt_path.exists():
        meta = trainutil.load_checkpoint(ckpt_path, system, optimizer)
        start_step = meta.get("step", 0)

    examples = dataset.examples("train")
    if not examples:
        raise ConfigError("training split is empty")

    batch_rng = np.random.default_rng([train_config.seed, 1])
    query_rng = np.random.default_rng([train_config.seed, 2])
    torch_rng = torch.Generator().manual_seed(train_config.seed)

    stopper = trainutil.EarlyStopper(train_config.patience)
    best_state = None
    system.train()
    step = start_step
    while step < train_config.max_steps:
        idx = batch_rng.integers(0, len(examples), train_config.batch_size)
        total, report = compute_batch_loss(
            system, dataset, examples, idx, "train", query_rng, torch_rng, "train"
        )
        trainutil.check_finite(report.total, step)
        optimizer.zero_grad()
        total.backward()
        trainutil.clip_gradients(system, train_config.clip)
        trainutil.set_lr(optimizer, trainutil.lr_at(step, train_config))
        optimizer.step()
        step += 1

        if step % train_config.val_interval == 0 or step == train_config.max_steps:
            val = validate_simple(system, dataset, train_config)
            metrics.write({"step": step, "split": "val", **val.as_dict()})
            if stopper.update(val.total):
                best_state = {
                    k: v.detach().clone() for k, v in system.state_dict().items()
                }
            system.train()
            if stopper.should_stop:
                break

    if best_state is not None:
        system.load_state_dict(best_state)
    system.eval()
    trainutil.save_checkpoint(
        ckpt_path,
        system,
        {"step": step, "best_val": stopper.best, "configs": system.config_meta()},
        optimizer,
    )
    return ckpt_path


def validate_simple(
    system: SimpleSystem, dataset: Dataset, train_config: TrainConfig
) -> objectives.LossReport:
    """Deterministic evaluation-phase loss over (a subset of) the val split."""
    examples = dataset.examples("val") or dataset.examples("train")
    rng = np.random.default_rng([train_config.seed, 3])
    n = min(len(examples), 4 * train_config.batch_size)
    idx = np.arange(n)
    system.eval()
    with torch.no_grad():
        reports = []
        for lo in range(0, n, train_config.batch_size):
            _, rep = compute_batch_loss(
                system,
                dataset,
                examples,
                idx[lo : lo + train_config.batch_size],
                "val" if dataset.examples("val") else "train",
                rng,
                None,
                "eval",
            )
            reports.append(rep)
    keys = reports[0].as_dict().keys()
    mean = {k: float(np.mean([r.as_dict()[k] for r in reports])) for k in keys}
    return objectives.LossReport(**mean)
