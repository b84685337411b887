"""Judge classifiers, attribute-swap protocols, the Frechet embedding
distance, and latent-space exports.

Disentanglement is always scored through judged decoder outputs, never raw
latents: after a pitch (or timbre) swap, the rendered source must be
classified as the preserved instrument and the swapped pitch content.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import trainutil
from .datagen.chorales import REST_CLASS
from .datagen.store import Dataset
from .encoders import ConvEmbedder, concat_fuse
from .errors import ConfigError, MissingArtifactError, ShapeError
from .ldm.sampler import latents_to_mels, sample_from_bundles
from .trainutil import TrainConfig


@dataclass
class SwapReport:
    protocol: str
    pitch_accuracy: float
    instrument_accuracy: float
    n_examples: int
    n_skipped: int = 0
    per_class: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True))


@dataclass
class FedReport:
    mean_distance: float
    overall_distance: float
    per_instrument: dict
    embedding_dim: int
    n_real: int
    n_generated: int

    def as_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# judges


class ChordJudge(nn.Module):
    """Conv embedder + 3-layer MLP; `kind` picks the output arity and loss."""

    def __init__(self, kind: str, n_out: int, conv_width: int = 128, embed_dim: int = 64):
        super().__init__()
        if kind not in ("instrument", "pitch"):
            raise ConfigError(f"unknown judge kind {kind!r}")
        self.kind = kind
        self.n_out = n_out
        self.embedder = ConvEmbedder(128, conv_width, embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, embed_dim), nn.ReLU(), nn.Linear(embed_dim, embed_dim), nn.ReLU()
        )
        self.head = nn.Linear(embed_dim, n_out)

    def embed(self, mel: torch.Tensor) -> torch.Tensor:
        single = mel.dim() == 2
        x = mel.unsqueeze(0) if single else mel
        h = self.mlp(self.embedder(x))
        return h.squeeze(0) if single else h

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        single = mel.dim() == 2
        x = mel.unsqueeze(0) if single else mel
        out = self.head(self.mlp(self.embedder(x)))
        return out.squeeze(0) if single else out


class ChoraleInstrumentJudge(nn.Module):
    """Strided conv stack over chorale mels; penultimate 16-dim pooled tap."""

    def __init__(self, n_out: int, mel_bands: int = 64, width: int = 64, tap_dim: int = 16):
        super().__init__()
        self.kind = "instrument"
        self.n_out = n_out
        self.tap_dim = tap_dim
        self.net = nn.Sequential(
            nn.Conv1d(mel_bands, width, 5, stride=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, width, 5, stride=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, width, 5, stride=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, tap_dim, 1),
        )
        self.head = nn.Linear(tap_dim, n_out)

    def embed(self, mel: torch.Tensor) -> torch.Tensor:
        single = mel.dim() == 2
        x = mel.unsqueeze(0) if single else mel
        h = self.net(x).mean(dim=2)
        return h.squeeze(0) if single else h

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        single = mel.dim() == 2
        x = mel.unsqueeze(0) if single else mel
        out = self.head(self.net(x).mean(dim=2))
        return out.squeeze(0) if single else out


class ChoralePitchJudge(nn.Module):
    """Framewise pitch classifier: [B, bands, T] -> [B, n_classes, T]."""

    def __init__(self, n_out: int = 129, mel_bands: int = 64, width: int = 128):
        super().__init__()
        self.kind = "pitch"
        self.n_out = n_out
        self.net = nn.Sequential(
            nn.Conv1d(mel_bands, width, 5, padding=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, width, 5, padding=2),
            nn.GroupNorm(1, width),
            nn.ReLU(),
            nn.Conv1d(width, n_out, 1),
        )

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        single = mel.dim() == 2
        x = mel.unsqueeze(0) if single else mel
        out = self.net(x)
        return out.squeeze(0) if single else out


def _source_table(dataset: Dataset, split: str):
    mels, insts, anns = [], [], []
    for ex in dataset.examples(split):
        for si in range(ex.n_sources):
            mels.append(ex.source_mels[si])
            insts.append(ex.instrument_ids[si])
            anns.append(ex.annotations[si])
    return mels, np.array(insts), anns


def build_judges(dataset: Dataset, conv_width: int = 128) -> tuple[nn.Module, nn.Module]:
    n_instruments = len(dataset.manifest["instruments"])
    if dataset.kind == "chords":
        n_p = dataset.manifest["n_pitches"]
        return ChordJudge("instrument", n_instruments, conv_width), ChordJudge(
            "pitch", n_p, conv_width
        )
    bands = dataset.manifest["mel"]["mel_bands"]
    return (
        ChoraleInstrumentJudge(n_instruments, mel_bands=bands),
        ChoralePitchJudge(dataset.manifest["n_pitches"], mel_bands=bands),
    )


def train_judges(
    dataset: Dataset,
    train_config: TrainConfig,
    out_dir: str | Path,
    conv_width: int = 128,
) -> tuple[nn.Module, nn.Module]:
    """Fit instrument and pitch judges on train-split source mels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inst_judge, pitch_judge = build_judges(dataset, conv_width)
    mels, insts, anns = _source_table(dataset, "train")
    if not mels:
        raise MissingArtifactError("dataset has no training sources")
    rng = np.random.default_rng([train_config.seed, 40])

    for judge, target in ((inst_judge, "instrument"), (pitch_judge, "pitch")):
        optimizer = torch.optim.Adam(judge.parameters(), lr=train_config.lr)
        judge.train()
        for step in range(train_config.max_steps):
            idx = rng.integers(0, len(mels), train_config.batch_size)
            x = torch.from_numpy(np.stack([mels[i] for i in idx]))
            logits = judge(x)
            if target == "instrument":
                labels = torch.as_tensor(insts[idx], dtype=torch.long)
                loss = nn.functional.cross_entropy(logits, labels)
            elif dataset.kind == "chords":
                y = torch.from_numpy(np.stack([anns[i] for i in idx]))
                loss = nn.functional.binary_cross_entropy_with_logits(logits, y)
            else:  # framewise classes
                y = torch.from_numpy(np.stack([anns[i] for i in idx]))
                loss = nn.functional.cross_entropy(logits, y.argmax(dim=1))
            trainutil.check_finite(float(loss.detach()), step)
            optimizer.zero_grad()
            loss.backward()
            trainutil.clip_gradients(judge, train_config.clip)
            optimizer.step()
        judge.eval()

    acc = judge_holdout_accuracy(dataset, inst_judge, pitch_judge)
    meta = {"accuracy": acc, "kind": dataset.kind, "conv_width": conv_width,
            "n_instruments": inst_judge.n_out, "n_pitches": pitch_judge.n_out,
            "mel_bands": dataset.manifest["mel"]["mel_bands"]}
    trainutil.save_checkpoint(out_dir / "judge_instrument.ckpt", inst_judge, meta)
    trainutil.save_checkpoint(out_dir / "judge_pitch.ckpt", pitch_judge, meta)
    return inst_judge, pitch_judge


def load_judges(out_dir: str | Path) -> tuple[nn.Module, nn.Module]:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "judge_instrument.ckpt.json").read_text())
    if meta["kind"] == "chords":
        inst = ChordJudge("instrument", meta["n_instruments"], meta["conv_width"])
        pitch = ChordJudge("pitch", meta["n_pitches"], meta["conv_width"])
    else:
        inst = ChoraleInstrumentJudge(meta["n_instruments"], mel_bands=meta["mel_bands"])
        pitch = ChoralePitchJudge(meta["n_pitches"], mel_bands=meta["mel_bands"])
    trainutil.load_checkpoint(out_dir / "judge_instrument.ckpt", inst)
    trainutil.load_checkpoint(out_dir / "judge_pitch.ckpt", pitch)
    inst.eval()
    pitch.eval()
    return inst, pitch


@torch.no_grad()
def judge_holdout_accuracy(dataset: Dataset, inst_judge, pitch_judge) -> dict:
    mels, insts, anns = _source_table(dataset, "test")
    inst_judge.eval()
    pitch_judge.eval()
    inst_hits = pitch_hits = 0
    total_frames = hit_frames = 0
    for mel, inst, ann in zip(mels, insts, anns):
        x = torch.from_numpy(mel)
        if int(inst_judge(x).argmax()) == inst:
            inst_hits += 1
        logits = pitch_judge(x)
        if dataset.kind == "chords":
            pred = (torch.sigmoid(logits) > 0.5).numpy().astype(np.float32)
            if np.array_equal(pred, ann):
                pitch_hits += 1
        else:
            pred = logits.argmax(dim=0).numpy()
            truth = ann.argmax(axis=0)
            mask = truth != REST_CLASS
            hit_frames += int((pred[mask] == truth[mask]).sum())
            total_frames += int(mask.sum())
    out = {"instrument": inst_hits / max(1, len(mels))}
    if dataset.kind == "chords":
        out["pitch_exact"] = pitch_hits / max(1, len(mels))
    else:
        out["pitch_frame"] = hit_frames / max(1, total_frames)
    return out


# ---------------------------------------------------------------------------
# swap protocols (vector-mode system)


def _non_identity_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ConfigError("no non-identity permutation of fewer than 2 sources")
    while True:
        perm = rng.permutation(n)
        if not np.array_equal(perm, np.arange(n)):
            return perm


def _exact_multi_hot_match(logits: torch.Tensor, annotation: np.ndarray) -> bool:
    pred = (torch.sigmoid(logits) > 0.5).numpy().astype(np.float32)
    return bool(np.array_equal(pred, annotation))


@torch.no_grad()
def eval_disentangle_single(
    system,
    dataset: Dataset,
    inst_judge,
    pitch_judge,
    rng: np.random.Generator,
    split: str = "test",
    max_examples: int | None = None,
    force_identity: bool = False,
) -> SwapReport:
    """Swap pitch latents within each mixture, decode each source alone, and
    judge that timbre survived while pitch followed the permutation."""
    system.eval()
    examples = dataset.examples(split)
    if max_examples:
        examples = examples[:max_examples]
    n = skipped = inst_hits = pitch_hits = 0
    per_class: dict[str, dict[str, int]] = {}
    for ex in examples:
        if ex.n_sources < 2 and not force_identity:
            skipped += 1
            continue
        queries = [
            torch.from_numpy(dataset.sample_query(inst, split, rng))
            for inst in ex.instrument_ids
        ]
        bundles = system.encoder.encode_sources(
            torch.from_numpy(ex.mixture_mel), queries, phase="eval"
        )
        if force_identity:
            perm = np.arange(ex.n_sources)
        else:
            perm = _non_identity_permutation(ex.n_sources, rng)
        for i, b in enumerate(bundles):
            s_hat = system.encoder.film_fuse(b.tau, bundles[perm[i]].nu)
            mel = system.decoder(s_hat)
            inst_ok = int(inst_judge(mel).argmax()) == ex.instrument_ids[i]
            pitch_ok = _exact_multi_hot_match(pitch_judge(mel), ex.annotations[perm[i]])
            inst_hits += inst_ok
            pitch_hits += pitch_ok
            n += 1
            stats = per_class.setdefault(str(ex.instrument_ids[i]), {"n": 0, "inst": 0, "pitch": 0})
            stats["n"] += 1
            stats["inst"] += inst_ok
            stats["pitch"] += pitch_ok
    if n == 0:
        raise ConfigError("no mixtures with at least two sources in this split")
    return SwapReport(
        protocol="disentangle_single",
        pitch_accuracy=pitch_hits / n,
        instrument_accuracy=inst_hits / n,
        n_examples=n,
        n_skipped=skipped,
        per_class=per_class,
    )


@torch.no_grad()
def eval_mixture_render(
    system,
    dataset: Dataset,
    inst_judge,
    pitch_judge,
    rng: np.random.Generator,
    split: str = "test",
    max_examples: int | None = None,
    force_identity: bool = False,
) -> SwapReport:
    """Swap pitch latents, decode the summed set into a mixture, re-extract
    with the original queries, decode per source, and judge."""
    system.eval()
    examples = dataset.examples(split)
    if max_examples:
        examples = examples[:max_examples]
    n = skipped = inst_hits = pitch_hits = 0
    per_class: dict[str, dict[str, int]] = {}
    for ex in examples:
        if ex.n_sources < 2 and not force_identity:
            skipped += 1
            continue
        queries = [
            torch.from_numpy(dataset.sample_query(inst, split, rng))
            for inst in ex.instrument_ids
        ]
        bundles = system.encoder.encode_sources(
            torch.from_numpy(ex.mixture_mel), queries, phase="eval"
        )
        if force_identity:
            perm = np.arange(ex.n_sources)
        else:
            perm = _non_identity_permutation(ex.n_sources, rng)
        s_hat = [
            system.encoder.film_fuse(b.tau, bundles[perm[i]].nu) for i, b in enumerate(bundles)
        ]
        mixture_hat = system.decoder(torch.stack(s_hat).sum(dim=0))
        re_bundles = system.encoder.encode_sources(mixture_hat, queries, phase="eval")
        for i, b in enumerate(re_bundles):
            mel = system.decoder(b.s)
            inst_ok = int(inst_judge(mel).argmax()) == ex.instrument_ids[i]
            pitch_ok = _exact_multi_hot_match(pitch_judge(mel), ex.annotations[perm[i]])
            inst_hits += inst_ok
            pitch_hits += pitch_ok
            n += 1
            stats = per_class.setdefault(str(ex.instrument_ids[i]), {"n": 0, "inst": 0, "pitch": 0})
            stats["n"] += 1
            stats["inst"] += inst_ok
            stats["pitch"] += pitch_ok
    if n == 0:
        raise ConfigError("no mixtures with at least two sources in this split")
    return SwapReport(
        protocol="mixture_render",
        pitch_accuracy=pitch_hits / n,
        instrument_accuracy=inst_hits / n,
        n_examples=n,
        n_skipped=skipped,
        per_class=per_class,
    )


# ---------------------------------------------------------------------------
# SATB timbre swap (diffusion system)


@torch.no_grad()
def eval_satb_swap(
    system,
    dataset: Dataset,
    inst_judge,
    pitch_judge,
    rng: np.random.Generator,
    mode: str = "set",
    n_steps: int = 100,
    split: str = "test",
    max_pairs: int | None = None,
    self_swap: bool = False,
) -> SwapReport:
    """Replace each reference timbre latent with the same-part target timbre,
    sample source latents, decode, and judge instrument (target) and melody
    (reference, frame accuracy over non-rest frames)."""
    system.eval()
    examples = dataset.examples(split)
    if len(examples) < 2:
        raise ConfigError("need at least two mixtures to pair")
    order = rng.permutation(len(examples))
    pairs = [(order[i], order[i + 1]) for i in range(0, len(order) - 1, 2)]
    if max_pairs:
        pairs = pairs[:max_pairs]
    torch_rng = torch.Generator().manual_seed(int(rng.integers(2**31)))

    n = inst_hits = 0
    hit_frames = total_frames = 0
    per_class: dict[str, dict[str, int]] = {}
    for ri, ti in pairs:
        ref, tgt = examples[ri], examples[ti]
        if ref.part_labels is None or tgt.part_labels is None:
            raise ConfigError("SATB swap requires part labels")
        ref_queries = [
            torch.from_numpy(dataset.sample_query(inst, split, rng))
            for inst in ref.instrument_ids
        ]
        ref_bundles = system.encoder.encode_sources(
            torch.from_numpy(ref.mixture_mel), ref_queries, phase="eval"
        )
        if self_swap:
            tgt, tgt_bundles = ref, ref_bundles
        else:
            tgt_queries = [
                torch.from_numpy(dataset.sample_query(inst, split, rng))
                for inst in tgt.instrument_ids
            ]
            tgt_bundles = system.encoder.encode_sources(
                torch.from_numpy(tgt.mixture_mel), tgt_queries, phase="eval"
            )
        part_of_tgt = {p: k for k, p in enumerate(tgt.part_labels)}
        swapped = []
        tgt_insts = []
        for k, part in enumerate(ref.part_labels):
            j = part_of_tgt[part]
            tau = tgt_bundles[j].tau
            nu = ref_bundles[k].nu
            swapped.append(
                replace(ref_bundles[k], tau=tau, tau_mu=tgt_bundles[j].tau_mu,
                        tau_sigma=tgt_bundles[j].tau_sigma, s=concat_fuse(tau, nu))
            )
            tgt_insts.append(tgt.instrument_ids[j])
        latents = sample_from_bundles(
            system.dit, system.schedule, swapped, system.grid_shape, n_steps,
            rng=torch_rng, mode=mode, patches=system.extras.patches,
        )
        mels = latents_to_mels(system.latent_ae, latents)
        for k, mel in enumerate(mels):
            inst_ok = int(inst_judge(mel).argmax()) == tgt_insts[k]
            inst_hits += inst_ok
            n += 1
            pred = pitch_judge(mel).argmax(dim=0).numpy()
            truth = ref.annotations[k].argmax(axis=0)
            mask = truth != REST_CLASS
            hit_frames += int((pred[mask] == truth[mask]).sum())
            total_frames += int(mask.sum())
            stats = per_class.setdefault(str(tgt_insts[k]), {"n": 0, "inst": 0})
            stats["n"] += 1
            stats["inst"] += inst_ok
    return SwapReport(
        protocol="satb_swap",
        pitch_accuracy=hit_frames / max(1, total_frames),
        instrument_accuracy=inst_hits / max(1, n),
        n_examples=n,
        per_class=per_class,
    )


# ---------------------------------------------------------------------------
# Frechet embedding distance


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def gaussian_frechet_distance(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray
) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) with PSD-clamped roots."""
    root1 = _sqrtm_psd(cov1)
    cross = _sqrtm_psd(root1 @ cov2 @ root1)
    d2 = float(
        np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross)
    )
    if d2 < -1e-8:
        raise ShapeError(f"Frechet distance collapsed below numerical noise: {d2}")
    return max(d2, 0.0)


def embeddings_frechet_distance(emb1: np.ndarray, emb2: np.ndarray) -> float:
    dim = emb1.shape[1]
    if emb1.shape[0] < dim + 1 or emb2.shape[0] < dim + 1:
        raise ConfigError(
            f"need at least dim+1={dim + 1} samples per side, got {emb1.shape[0]}/{emb2.shape[0]}"
        )
    mu1, mu2 = emb1.mean(axis=0), emb2.mean(axis=0)
    cov1 = np.cov(emb1, rowvar=False)
    cov2 = np.cov(emb2, rowvar=False)
    return gaussian_frechet_distance(mu1, cov1, mu2, cov2)


@torch.no_grad()
def frechet_embedding_distance(
    real_mels,
    gen_mels,
    judge,
    real_labels=None,
    gen_labels=None,
) -> FedReport:
    """Fit Gaussians to the judge's penultimate embeddings of each side."""

    def embed_all(mels):
        rows = [judge.embed(torch.as_tensor(np.asarray(m))).numpy() for m in mels]
        return np.stack(rows).astype(np.float64)

    real = embed_all(real_mels)
    gen = embed_all(gen_mels)
    overall = embeddings_frechet_distance(real, gen)
    per_instrument = {}
    dim = real.shape[1]
    if real_labels is not None and gen_labels is not None:
        real_labels = np.asarray(real_labels)
        gen_labels = np.asarray(gen_labels)
        for label in sorted(set(real_labels) & set(gen_labels)):
            a = real[real_labels == label]
            b = gen[gen_labels == label]
            if a.shape[0] >= dim + 1 and b.shape[0] >= dim + 1:
                per_instrument[str(label)] = embeddings_frechet_distance(a, b)
    mean_distance = (
        float(np.mean(list(per_instrument.values()))) if per_instrument else overall
    )
    return FedReport(
        mean_distance=mean_distance,
        overall_distance=overall,
        per_instrument=per_instrument,
        embedding_dim=dim,
        n_real=real.shape[0],
        n_generated=gen.shape[0],
    )


# ---------------------------------------------------------------------------
# latent-space exports


def pca_2d(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centred 2-component PCA; returns (coords [N,2], explained variance)."""
    if data.shape[0] < 3:
        raise ConfigError("PCA export needs at least 3 samples")
    centred = data - data.mean(axis=0)
    if np.allclose(centred, 0.0):
        import warnings

        warnings.warn("PCA input has zero variance", RuntimeWarning, stacklevel=2)
    u, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:2]
    # deterministic sign: largest-magnitude coefficient positive
    for k in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[k]))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    coords = centred @ comps.T
    var = (s[:2] ** 2) / max(1, data.shape[0] - 1)
    return coords, var


def silhouette_score(coords: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over samples; 0.0 when fewer than two clusters."""
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        return 0.0
    dists = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    scores = []
    for i in range(len(coords)):
        same = labels == labels[i]
        same[i] = False
        if not same.any():
            continue
        a = dists[i][same].mean()
        b = min(dists[i][labels == c].mean() for c in classes if c != labels[i])
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores)) if scores else 0.0


@torch.no_grad()
def collect_timbre_latents(system, dataset: Dataset, rng: np.random.Generator,
                           split: str = "test", max_examples: int | None = None):
    """Evaluation-phase timbre latents (flattened) with instrument labels."""
    system.eval()
    taus, labels = [], []
    examples = dataset.examples(split)
    if max_examples:
        examples = examples[:max_examples]
    for ex in examples:
        queries = [
            torch.from_numpy(dataset.sample_query(inst, split, rng))
            for inst in ex.instrument_ids
        ]
        bundles = system.encoder.encode_sources(
            torch.from_numpy(ex.mixture_mel), queries, phase="eval"
        )
        for b, inst in zip(bundles, ex.instrument_ids):
            taus.append(b.tau.reshape(-1).numpy())
            labels.append(inst)
    return np.stack(taus), labels


@torch.no_grad()
def export_spectrogram_grid(
    system,
    dataset: Dataset,
    rng: np.random.Generator,
    png_path: str | Path,
    split: str = "test",
) -> dict:
    """Four-row figure: queries / input mixture+sources / reconstructions /
    pitch-swapped renderings (vector-mode system)."""
    system.eval()
    candidates = [ex for ex in dataset.examples(split) if ex.n_sources >= 2]
    if not candidates:
        raise ConfigError("no multi-source mixtures to export")
    ex = candidates[int(rng.integers(len(candidates)))]
    queries = [
        torch.from_numpy(dataset.sample_query(inst, split, rng)) for inst in ex.instrument_ids
    ]
    bundles = system.encoder.encode_sources(
        torch.from_numpy(ex.mixture_mel), queries, phase="eval"
    )
    perm = _non_identity_permutation(ex.n_sources, rng)
    recon_mix = system.decoder(torch.stack([b.s for b in bundles]).sum(dim=0))
    recon_sources = [system.decoder(b.s) for b in bundles]
    swapped = [
        system.decoder(system.encoder.film_fuse(b.tau, bundles[perm[i]].nu))
        for i, b in enumerate(bundles)
    ]
    swapped_mix = system.decoder(
        torch.stack(
            [system.encoder.film_fuse(b.tau, bundles[perm[i]].nu) for i, b in enumerate(bundles)]
        ).sum(dim=0)
    )
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = 1 + ex.n_sources
    fig, axes = plt.subplots(4, cols, figsize=(2.2 * cols, 8))
    rows = [
        [None] + [q.numpy() for q in queries],
        [ex.mixture_mel] + list(ex.source_mels),
        [recon_mix.numpy()] + [m.numpy() for m in recon_sources],
        [swapped_mix.numpy()] + [m.numpy() for m in swapped],
    ]
    titles = ["queries", "input", "reconstruction", "pitch swap"]
    for r, (row, title) in enumerate(zip(rows, titles)):
        for c in range(cols):
            ax = axes[r][c]
            ax.set_xticks([])
            ax.set_yticks([])
            if row[c] is None:
                ax.axis("off")
                continue
            ax.imshow(row[c], aspect="auto", origin="lower")
            if c == 0:
                ax.set_ylabel(title, fontsize=8)
    fig.tight_layout()
    Path(png_path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"png": str(png_path), "permutation": perm.tolist(), "instruments": ex.instrument_ids}


@torch.no_grad()
def export_residual_swap_demo(
    system,
    dataset: Dataset,
    rng: np.random.Generator,
    out_dir: str | Path,
    split: str = "test",
    identity: bool = False,
) -> dict:
    """Mixture-embedding surgery: subtract one fused latent, add a swapped
    one, decode the result next to the plain reconstruction."""
    from .decoder_simple import latent_residual_swap

    system.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    candidates = [ex for ex in dataset.examples(split) if ex.n_sources >= 2]
    if not candidates:
        raise ConfigError("no multi-source mixtures available")
    ex = candidates[int(rng.integers(len(candidates)))]
    queries = [
        torch.from_numpy(dataset.sample_query(inst, split, rng)) for inst in ex.instrument_ids
    ]
    e_m = system.encoder.encode_mixture(torch.from_numpy(ex.mixture_mel))
    bundles = system.encoder.encode_sources(
        torch.from_numpy(ex.mixture_mel), queries, phase="eval"
    )
    if identity:
        s_new = bundles[0].s
    else:
        s_new = system.encoder.film_fuse(bundles[0].tau, bundles[1].nu)
    e_hat = latent_residual_swap(e_m, bundles[0].s, s_new)
    plain = system.decoder(e_m).numpy()
    swapped = system.decoder(e_hat).numpy()
    np.save(out_dir / "residual_plain.npy", plain)
    np.save(out_dir / "residual_swapped.npy", swapped)
    summary = {
        "identity": identity,
        "max_abs_difference": float(np.max(np.abs(plain - swapped))),
        "files": ["residual_plain.npy", "residual_swapped.npy"],
    }
    (out_dir / "residual_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def export_pca(
    tau_set: np.ndarray,
    labels,
    csv_path: str | Path,
    png_path: str | Path | None = None,
) -> dict:
    coords, var = pca_2d(np.asarray(tau_set, dtype=np.float64))
    labels = list(labels)
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "instrument"])
        for (x, y), lab in zip(coords, labels):
            writer.writerow([f"{x:.6f}", f"{y:.6f}", lab])
    sil = silhouette_score(coords, np.asarray(labels))
    if png_path is not None:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt

            fig, ax = plt.subplots(figsize=(5, 4))
            for lab in sorted(set(labels)):
                mask = np.asarray(labels) == lab
                ax.scatter(coords[mask, 0], coords[mask, 1], s=8, label=str(lab))
            ax.legend(fontsize=7)
            ax.set_xlabel("pc1")
            ax.set_ylabel("pc2")
            fig.tight_layout()
            fig.savefig(png_path, dpi=120)
            plt.close(fig)
        except ImportError:
            png_path = None
    return {
        "csv": str(csv_path),
        "png": str(png_path) if png_path else None,
        "silhouette": sil,
        "explained_variance": [float(v) for v in var],
    }
