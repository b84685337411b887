"""Trainers for the latent autoencoder and the set-conditioned diffusion stack."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .. import objectives, trainutil
from ..datagen.store import Dataset
from ..encoders import (
    EncoderConfig,
    SourceEncoder,
    concat_fuse,
    reparameterise,
    stochastic_binarise,
)
from ..errors import ConfigError, MissingArtifactError
from ..objectives import LossConfig
from ..trainutil import TrainConfig
from .autoencoder import LatentAutoencoder
from .dit import DiT, DiTConfig
from .partition import partition, stack_sources
from .schedule import DiffusionSchedule, build_schedule, forward_diffuse


def _mel_pool(dataset: Dataset, split: str) -> list[np.ndarray]:
    """Mixture and source mels pooled (the autoencoder serves both roles)."""
    mels = []
    for ex in dataset.examples(split):
        mels.append(ex.mixture_mel)
        mels.extend(ex.source_mels)
    return mels


def train_latent_ae(
    dataset: Dataset,
    ae: LatentAutoencoder,
    train_config: TrainConfig,
    out_dir: str | Path,
) -> Path:
    """Plain MSE autoencoding of log-mels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "latent_ae.ckpt"
    metrics = trainutil.MetricsWriter(out_dir / "metrics.jsonl")
    mels = _mel_pool(dataset, "train")
    if not mels:
        raise ConfigError("training split is empty")
    val_mels = _mel_pool(dataset, "val") or mels

    optimizer = torch.optim.Adam(ae.parameters(), lr=train_config.lr)
    rng = np.random.default_rng([train_config.seed, 10])
    stopper = trainutil.EarlyStopper(train_config.patience)
    best_state = None
    ae.train()
    step = 0
    while step < train_config.max_steps:
        idx = rng.integers(0, len(mels), train_config.batch_size)
        x = torch.from_numpy(np.stack([mels[i] for i in idx]))
        recon = ae(x)
        loss = nn.functional.mse_loss(recon, x)
        trainutil.check_finite(float(loss.detach()), step)
        optimizer.zero_grad()
        loss.backward()
        trainutil.clip_gradients(ae, train_config.clip)
        optimizer.step()
        step += 1
        if step % train_config.val_interval == 0 or step == train_config.max_steps:
            ae.eval()
            with torch.no_grad():
                vx = torch.from_numpy(np.stack(val_mels[: 4 * train_config.batch_size]))
                val = float(nn.functional.mse_loss(ae(vx), vx))
            metrics.write({"step": step, "split": "val", "mse": val})
            if stopper.update(val):
                best_state = {k: v.detach().clone() for k, v in ae.state_dict().items()}
            ae.train()
            if stopper.should_stop:
                break
    if best_state is not None:
        ae.load_state_dict(best_state)
    ae.eval()
    trainutil.save_checkpoint(
        ckpt,
        ae,
        {
            "step": step,
            "best_val": stopper.best,
            "configs": {"width": ae.encoder.net[0].out_channels, "channels": ae.channels,
                        "mel_bands": ae.mel_bands, "mel_frames": ae.mel_frames},
        },
        optimizer,
    )
    return ckpt


def load_latent_ae(path: str | Path) -> LatentAutoencoder:
    meta = json.loads(Path(str(path) + ".json").read_text())
    cfg = meta["configs"]
    ae = LatentAutoencoder(cfg["width"], cfg["channels"], cfg["mel_bands"], cfg["mel_frames"])
    trainutil.load_checkpoint(path, ae)
    ae.eval()
    return ae


@dataclass(frozen=True)
class LdmTrainExtras:
    mode: str = "set"  # "set" | "single"
    schedule_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    patches: int = 25


class LdmSystem(nn.Module):
    """Grid-mode encoders plus the diffusion transformer (one trainable unit;
    the latent autoencoder inside the encoder stays frozen)."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        dit_config: DiTConfig,
        loss_config: LossConfig,
        latent_ae: LatentAutoencoder,
        extras: LdmTrainExtras,
    ):
        super().__init__()
        self.encoder_config = encoder_config
        self.dit_config = dit_config
        self.loss_config = loss_config
        self.extras = extras
        self.encoder = SourceEncoder(encoder_config, latent_ae=latent_ae)
        self.dit = DiT(dit_config)
        for p in self.encoder.latent_ae.parameters():
            p.requires_grad_(False)
        self.schedule: DiffusionSchedule = build_schedule(
            extras.schedule_T, extras.beta_start, extras.beta_end
        )

    @property
    def latent_ae(self) -> LatentAutoencoder:
        return self.encoder.latent_ae

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        c = self.encoder_config
        return (c.grid_channels, c.grid_time, c.grid_feat)

    def config_meta(self) -> dict:
        ae = self.latent_ae
        return {
            "encoder": asdict(self.encoder_config),
            "dit": asdict(self.dit_config),
            "loss": asdict(self.loss_config),
            "extras": asdict(self.extras),
            "ae": {
                "width": ae.encoder.net[0].out_channels,
                "channels": ae.channels,
                "mel_bands": ae.mel_bands,
                "mel_frames": ae.mel_frames,
            },
        }

    @classmethod
    def from_meta(cls, meta: dict, latent_ae: LatentAutoencoder) -> "LdmSystem":
        return cls(
            EncoderConfig(**meta["encoder"]),
            DiTConfig(**meta["dit"]),
            LossConfig(**meta["loss"]),
            latent_ae,
            LdmTrainExtras(**meta["extras"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> tuple["LdmSystem", dict]:
        meta = json.loads(Path(str(path) + ".json").read_text())
        cfg = meta["configs"]
        ae_cfg = cfg["ae"]
        ae = LatentAutoencoder(
            ae_cfg["width"], ae_cfg["channels"], ae_cfg["mel_bands"], ae_cfg["mel_frames"]
        )
        system = cls.from_meta(cfg, ae)
        trainutil.load_checkpoint(path, system)
        system.eval()
        return system, meta


def encode_batch_bundles(
    system: LdmSystem,
    dataset: Dataset,
    examples,
    idx,
    split: str,
    query_rng: np.random.Generator,
    torch_rng: torch.Generator | None,
    phase: str,
    source_pick: np.ndarray | None = None,
):
    """Vectorised per-source encoding over a batch of grid-mode examples.

    `source_pick`, when given, selects a single source per example (the
    single-source training regime); otherwise all sources are encoded.
    Returns (z0 patch rows, condition rows, per-source tensors for losses).
    """
    enc = system.encoder
    cfg = system.loss_config
    x_m = torch.from_numpy(np.stack([examples[i].mixture_mel for i in idx]))
    owners, x_s, y, queries = [], [], [], []
    for row, i in enumerate(idx):
        ex = examples[i]
        source_ids = (
            range(ex.n_sources) if source_pick is None else [int(source_pick[row])]
        )
        for si in source_ids:
            owners.append(row)
            x_s.append(ex.source_mels[si])
            y.append(ex.annotations[si])
            queries.append(dataset.sample_query(ex.instrument_ids[si], split, query_rng))
    owners_t = torch.as_tensor(np.array(owners), dtype=torch.long)
    x_s_t = torch.from_numpy(np.stack(x_s))
    y_t = torch.from_numpy(np.stack(y))
    x_q = torch.from_numpy(np.stack(queries))

    with torch.no_grad():
        e_m = enc.latent_ae.encode(x_m)
        z_s = enc.latent_ae.encode(x_s_t)  # clean source latents, frozen path
    e_q = enc.encode_query(x_q)
    ctx = enc.grid_fuse(e_m[owners_t], e_q)
    y_logits = enc.transcriber(ctx)
    if cfg.use_sb:
        y_bin = stochastic_binarise(y_logits, phase, torch_rng, enc.config.eval_threshold)
    else:
        y_bin = torch.sigmoid(y_logits)
    nu = enc.pitch_translator(y_bin)
    mu, sigma = enc.grid_timbre(ctx)
    tau = reparameterise(mu, sigma, phase, torch_rng)
    s = concat_fuse(tau, nu)
    return {
        "owners": owners_t,
        "z_s": z_s,
        "s": s,
        "e_q": e_q,
        "mu": mu,
        "sigma": sigma,
        "y_logits": y_logits,
        "y": y_t,
        "n_examples": len(idx),
    }


def ldm_batch_loss(
    system: LdmSystem,
    batch: dict,
    torch_rng: torch.Generator | None,
    fixed_t: int | None = None,
):
    """x0-prediction MSE plus flagged encoder losses, averaged per example."""
    cfg = system.loss_config
    extras = system.extras
    owners = batch["owners"]
    b = batch["n_examples"]

    z_patches = partition(batch["z_s"], patches=extras.patches, add_positional=True)
    s_patches = partition(batch["s"], patches=extras.patches, add_positional=False)
    # regroup flat sources into per-example token blocks
    z_rows, c_rows, t_rows = [], [], []
    if fixed_t is not None:
        t_per_example = torch.full((b,), fixed_t, dtype=torch.long)
    else:
        t_per_example = torch.randint(
            1, system.schedule.T + 1, (b,), generator=torch_rng
        )
    for row in range(b):
        mask = owners == row
        z_rows.append(z_patches[mask].reshape(-1, z_patches.shape[-1]))
        c_rows.append(s_patches[mask].reshape(-1, s_patches.shape[-1]))
        t_rows.append(t_per_example[row])
    # equal source counts per example make a rectangular batch
    z0 = torch.stack(z_rows)
    cond = torch.stack(c_rows)
    t = torch.stack(t_rows)
    eps = torch.randn(z0.shape, generator=torch_rng, dtype=z0.dtype)
    z_t = forward_diffuse(z0, t, eps, system.schedule)
    x0_pred = system.dit(z_t, t, cond)
    # per-example sum over latent cells, like the log-likelihood it replaces
    diffusion_mse = ((x0_pred - z0) ** 2).reshape(b, -1).sum(dim=1).mean()

    kld = objectives.gaussian_kld(
        batch["mu"].reshape(batch["mu"].shape[0], -1),
        batch["sigma"].reshape(batch["sigma"].shape[0], -1),
    ).sum() / b
    bce = (
        nn.functional.binary_cross_entropy_with_logits(
            batch["y_logits"], batch["y"], reduction="none"
        )
        .mean(dim=(1, 2))
        .sum()
        / b
    )
    bt = objectives.barlow_twins(
        batch["e_q"].reshape(batch["e_q"].shape[0], 1, -1),
        batch["mu"].reshape(batch["mu"].shape[0], 1, -1),
    )

    total = diffusion_mse
    parts = {"diffusion_mse": float(diffusion_mse.detach())}
    if cfg.use_kld:
        total = total + kld
        parts["kld_tau"] = float(kld.detach())
    if cfg.use_bce:
        total = total + bce
        parts["bce"] = float(bce.detach())
    if cfg.use_bt:
        total = total + bt
        parts["bt"] = float(bt.detach())
    parts["total"] = float(total.detach())
    return total, parts


def train_ldm(
    dataset: Dataset,
    system: LdmSystem,
    train_config: TrainConfig,
    out_dir: str | Path,
    resume: bool = False,
) -> Path:
    if dataset.kind != "chorales":
        raise MissingArtifactError("diffusion training expects a chorale-style dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "ldm.ckpt"
    metrics = trainutil.MetricsWriter(out_dir / "metrics.jsonl")

    trainable = [p for p in system.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=train_config.lr)
    start_step = 0
    if resume and ckpt_path.exists():
        meta = trainutil.load_checkpoint(ckpt_path, system, optimizer)
        start_step = meta.get("step", 0)

    examples = dataset.examples("train")
    if not examples:
        raise ConfigError("training split is empty")
    single_mode = system.extras.mode == "single"

    batch_rng = np.random.default_rng([train_config.seed, 20])
    query_rng = np.random.default_rng([train_config.seed, 21])
    torch_rng = torch.Generator().manual_seed(train_config.seed + 17)

    stopper = trainutil.EarlyStopper(train_config.patience)
    best_state = None
    system.train()
    step = start_step
    while step < train_config.max_steps:
        idx = batch_rng.integers(0, len(examples), train_config.batch_size)
        pick = None
        if single_mode:
            counts = np.array([examples[i].n_sources for i in idx])
            pick = batch_rng.integers(0, counts)
        batch = encode_batch_bundles(
            system, dataset, examples, idx, "train", query_rng, torch_rng, "train", pick
        )
        total, parts = ldm_batch_loss(system, batch, torch_rng)
        trainutil.check_finite(parts["total"], step)
        optimizer.zero_grad()
        total.backward()
        trainutil.clip_gradients(system, train_config.clip)
        trainutil.set_lr(optimizer, trainutil.lr_at(step, train_config))
        optimizer.step()
        step += 1

        if step % train_config.val_interval == 0 or step == train_config.max_steps:
            val = validate_ldm(system, dataset, train_config)
            metrics.write({"step": step, "split": "val", **val})
            if stopper.update(val["total"]):
                best_state = {k: v.detach().clone() for k, v in system.state_dict().items()}
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


def validate_ldm(system: LdmSystem, dataset: Dataset, train_config: TrainConfig) -> dict:
    """Deterministic mid-schedule denoising loss on the val split."""
    examples = dataset.examples("val") or dataset.examples("train")
    split = "val" if dataset.examples("val") else "train"
    rng = np.random.default_rng([train_config.seed, 23])
    torch_rng = torch.Generator().manual_seed(train_config.seed + 29)
    n = min(len(examples), 2 * train_config.batch_size)
    system.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, n, train_config.batch_size):
            idx = np.arange(lo, min(lo + train_config.batch_size, n))
            pick = None
            if system.extras.mode == "single":
                counts = np.array([examples[i].n_sources for i in idx])
                pick = rng.integers(0, counts)
            batch = encode_batch_bundles(
                system, dataset, examples, idx, split, rng, torch_rng, "eval", pick
            )
            _, parts = ldm_batch_loss(
                system, batch, torch_rng, fixed_t=max(1, system.schedule.T // 2)
            )
            outs.append(parts)
    keys = outs[0].keys()
    return {k: float(np.mean([o[k] for o in outs])) for k in keys}
