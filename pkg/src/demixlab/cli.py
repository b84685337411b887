"""Command-line entry point: datagen, train, eval, export.

Every command resolves a declared key=value config (file + --set overrides +
dedicated flags), writes a reproducing snapshot into its output directory,
and exits 0 on success, 1 on usage/config errors, 2 on missing prerequisite
artifacts, and 3 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import configio, evalkit
from .datagen import chorales as chorales_mod
from .datagen import chords as chords_mod
from .datagen.instruments import DEFAULT_PART_POOLS
from .datagen.mel import MelConfig, mel_transform
from .datagen.store import Dataset
from .decoder_simple import SimpleDecoderConfig, SimpleSystem, train_simple
from .encoders import EncoderConfig
from .errors import ConfigError, MissingArtifactError
from .ldm import (
    DiTConfig,
    LatentAutoencoder,
    LdmSystem,
    LdmTrainExtras,
    load_latent_ae,
    sample_from_bundles,
    train_latent_ae,
    train_ldm,
)
from .ldm.sampler import latents_to_mels
from .objectives import LossConfig
from .trainutil import TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


DATAGEN_KEYS = {
    "chords": {"n": 3000, "seed": 0, "split": (0.7, 0.2, 0.1)},
    "chorales": {
        "n": 600,
        "seed": 0,
        "split": (0.8, 0.1, 0.1),
        "parts": ("S", "A", "T", "B"),
        "pool_size": 0,  # 0 keeps the full per-part instrument pools
    },
}

TRAIN_KEYS = {
    "simple": {
        "batch_size": 32,
        "lr": 4e-4,
        "clip": 0.5,
        "max_steps": 1600,
        "val_interval": 200,
        "patience": 5,
        "seed": 0,
        "conv_width": 192,
        "mlp_width": 192,
        "mlp_depth": 3,
        "gru_hidden": 128,
        "prior": "none",
        "K": 10,
        "use_sb": True,
        "use_kld": True,
        "use_bt": True,
        "use_bce": True,
        "sigma_m": 0.25,
        "sigma_nu": 0.5,
    },
    "judges": {"batch_size": 64, "lr": 1e-3, "clip": 1.0, "max_steps": 600, "seed": 0, "conv_width": 128},
    "latent-ae": {
        "batch_size": 16,
        "lr": 1e-3,
        "clip": 0.5,
        "max_steps": 1500,
        "val_interval": 150,
        "patience": 5,
        "seed": 0,
        "width": 32,
    },
    "ldm": {
        "batch_size": 8,
        "lr": 3e-4,
        "clip": 0.5,
        "max_steps": 3000,
        "val_interval": 250,
        "patience": 5,
        "warmup_steps": 50,
        "seed": 0,
        "mode": "set",
        "schedule_T": 1000,
        "beta_start": 1e-4,
        "beta_end": 2e-2,
        "blocks": 3,
        "heads": 4,
        "ff_mult": 1,
        "head_width": 64,
        "use_sb": True,
        "use_kld": True,
        "use_bt": True,
        "use_bce": True,
    },
}

EVAL_KEYS = {
    "swap": {"seed": 0, "split": "test", "max_examples": 0},
    "mixture-render": {"seed": 0, "split": "test", "max_examples": 0},
    "satb-swap": {"seed": 0, "split": "test", "mode": "set", "steps": 100, "max_pairs": 0},
    "fed": {"seed": 0, "split": "test", "steps": 100, "max_examples": 24},
}

EXPORT_KEYS = {
    "pca": {"seed": 0, "split": "test", "max_examples": 200},
    "spectrogram-grid": {"seed": 0, "split": "test"},
    "residual-swap-demo": {"seed": 0, "split": "test", "identity": False},
}


def build_parser() -> _Parser:
    parser = _Parser(prog="demixlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the seed key")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V")

    p = sub.add_parser("datagen", help="generate a dataset")
    p.add_argument("kind", choices=["chords", "chorales"])
    p.add_argument("--n", type=int, help="number of examples")
    common(p)

    p = sub.add_parser("train", help="train a component")
    p.add_argument("target", choices=["simple", "ldm", "judges", "latent-ae"])
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ae", help="latent autoencoder checkpoint (ldm target)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--no-sb", action="store_true")
    p.add_argument("--no-kld", action="store_true")
    p.add_argument("--no-bt", action="store_true")
    p.add_argument("--no-bce", action="store_true")
    p.add_argument("--prior", choices=["none", "fac", "rich"])
    p.add_argument("--K", type=int)
    p.add_argument("--mode", choices=["set", "single"])
    common(p)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("protocol", choices=["swap", "mixture-render", "satb-swap", "fed"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--judges", required=True, help="directory with judge checkpoints")
    p.add_argument("--mode", choices=["set", "single"])
    p.add_argument("--steps", type=int)
    common(p)

    p = sub.add_parser("export", help="export figures and tables")
    p.add_argument("kind", choices=["pca", "spectrogram-grid", "residual-swap-demo"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    common(p)
    return parser


def _resolve(declared, args, extra_overrides=None):
    overrides = list(args.overrides)
    if extra_overrides:
        overrides += extra_overrides
    cfg = configio.resolve_config(declared, args.config, overrides)
    if args.seed is not None:
        if "seed" not in declared:
            raise ConfigError("this command has no seed key")
        cfg["seed"] = args.seed
    return cfg


def cmd_datagen(args) -> int:
    cfg = _resolve(DATAGEN_KEYS[args.kind], args, [f"n={args.n}"] if args.n is not None else None)
    out = Path(args.out)
    if not out.parent.exists():
        raise MissingArtifactError(f"output directory parent does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    if args.kind == "chords":
        manifest = chords_mod.generate_dataset(
            chords_mod.ChordConfig(n_examples=cfg["n"], seed=cfg["seed"], split=cfg["split"]), out
        )
    else:
        pools = {
            part: (
                DEFAULT_PART_POOLS[part][: cfg["pool_size"]]
                if cfg["pool_size"] > 0
                else DEFAULT_PART_POOLS[part]
            )
            for part in cfg["parts"]
        }
        manifest = chorales_mod.generate_dataset(
            chorales_mod.ChoraleConfig(
                n_examples=cfg["n"],
                seed=cfg["seed"],
                split=cfg["split"],
                parts=tuple(cfg["parts"]),
                part_pools=pools,
            ),
            out,
        )
    configio.write_snapshot(out, f"datagen {args.kind}", cfg)
    print(manifest)
    return EXIT_OK


def _flag_overrides(args) -> list[str]:
    out = []
    if args.no_sb:
        out.append("use_sb=false")
    if args.no_kld:
        out.append("use_kld=false")
    if args.no_bt:
        out.append("use_bt=false")
    if args.no_bce:
        out.append("use_bce=false")
    if args.prior:
        out.append(f"prior={args.prior}")
    if args.K is not None:
        out.append(f"K={args.K}")
    if args.mode:
        out.append(f"mode={args.mode}")
    return out


def cmd_train(args) -> int:
    torch.manual_seed(0)
    dataset = Dataset(args.data)
    out = Path(args.out)

    if args.target == "simple":
        cfg = _resolve(TRAIN_KEYS["simple"], args, _flag_overrides(args))
        if dataset.kind != "chords":
            raise MissingArtifactError("the simple model trains on a chords dataset")
        torch.manual_seed(cfg["seed"])
        mel = dataset.manifest["mel"]
        system = SimpleSystem(
            EncoderConfig(
                mel_bands=mel["mel_bands"],
                frames=dataset.manifest["frames"],
                conv_width=cfg["conv_width"],
                mlp_width=cfg["mlp_width"],
                mlp_depth=cfg["mlp_depth"],
                n_pitches=dataset.manifest["n_pitches"],
            ),
            SimpleDecoderConfig(frames=dataset.manifest["frames"], out_bands=mel["mel_bands"],
                                hidden=cfg["gru_hidden"]),
            LossConfig(
                sigma_m=cfg["sigma_m"],
                sigma_nu=cfg["sigma_nu"],
                prior_kind=cfg["prior"],
                K=cfg["K"],
                use_bt=cfg["use_bt"],
                use_kld=cfg["use_kld"],
                use_sb=cfg["use_sb"],
                use_bce=cfg["use_bce"],
            ),
        )
        ckpt = train_simple(
            dataset,
            system,
            TrainConfig(
                batch_size=cfg["batch_size"],
                lr=cfg["lr"],
                clip=cfg["clip"],
                max_steps=cfg["max_steps"],
                val_interval=cfg["val_interval"],
                patience=cfg["patience"],
                seed=cfg["seed"],
            ),
            out,
            resume=args.resume,
        )
    elif args.target == "judges":
        cfg = _resolve(TRAIN_KEYS["judges"], args)
        torch.manual_seed(cfg["seed"])
        evalkit.train_judges(
            dataset,
            TrainConfig(
                batch_size=cfg["batch_size"], lr=cfg["lr"], clip=cfg["clip"],
                max_steps=cfg["max_steps"], seed=cfg["seed"],
            ),
            out,
            conv_width=cfg["conv_width"],
        )
        ckpt = out / "judge_instrument.ckpt"
    elif args.target == "latent-ae":
        cfg = _resolve(TRAIN_KEYS["latent-ae"], args)
        if dataset.kind != "chorales":
            raise MissingArtifactError("the latent autoencoder trains on a chorale dataset")
        torch.manual_seed(cfg["seed"])
        mel = dataset.manifest["mel"]
        ae = LatentAutoencoder(cfg["width"], mel_bands=mel["mel_bands"], mel_frames=dataset.manifest["frames"])
        ckpt = train_latent_ae(
            dataset,
            ae,
            TrainConfig(
                batch_size=cfg["batch_size"], lr=cfg["lr"], clip=cfg["clip"],
                max_steps=cfg["max_steps"], val_interval=cfg["val_interval"],
                patience=cfg["patience"], seed=cfg["seed"],
            ),
            out,
        )
    else:  # ldm
        cfg = _resolve(TRAIN_KEYS["ldm"], args, _flag_overrides(args))
        if dataset.kind != "chorales":
            raise MissingArtifactError("diffusion training expects a chorale dataset")
        if not args.ae:
            raise MissingArtifactError("--ae checkpoint is required (train latent-ae first)")
        torch.manual_seed(cfg["seed"])
        ae = load_latent_ae(args.ae)
        mel = dataset.manifest["mel"]
        grid_time = dataset.manifest["frames"] // 4
        grid_feat = mel["mel_bands"] // 4
        patches = 25
        embed = (grid_time // patches) * grid_feat * ae.channels
        enc_cfg = EncoderConfig(
            mode="grid",
            n_pitches=dataset.manifest["n_pitches"],
            grid_channels=ae.channels,
            grid_time=grid_time,
            grid_feat=grid_feat,
            pitch_frames=dataset.manifest["frames"],
            grid_mel_bands=mel["mel_bands"],
            grid_mel_frames=dataset.manifest["frames"],
            ae_width=cfg["head_width"] // 2,
            head_width=cfg["head_width"],
        )
        system = LdmSystem(
            enc_cfg,
            DiTConfig(
                blocks=cfg["blocks"], heads=cfg["heads"], embed_dim=embed,
                cond_dim=2 * embed, ff_mult=cfg["ff_mult"],
            ),
            LossConfig(
                use_bt=cfg["use_bt"], use_kld=cfg["use_kld"],
                use_sb=cfg["use_sb"], use_bce=cfg["use_bce"],
            ),
            ae,
            LdmTrainExtras(
                mode=cfg["mode"], schedule_T=cfg["schedule_T"],
                beta_start=cfg["beta_start"], beta_end=cfg["beta_end"], patches=patches,
            ),
        )
        ckpt = train_ldm(
            dataset,
            system,
            TrainConfig(
                batch_size=cfg["batch_size"], lr=cfg["lr"], clip=cfg["clip"],
                max_steps=cfg["max_steps"], val_interval=cfg["val_interval"],
                patience=cfg["patience"], seed=cfg["seed"], warmup_steps=cfg["warmup_steps"],
            ),
            out,
            resume=args.resume,
        )
    configio.write_snapshot(out, f"train {args.target}", cfg)
    print(ckpt)
    return EXIT_OK


def _load_system(checkpoint: str):
    sidecar = Path(checkpoint + ".json")
    if not sidecar.exists():
        raise MissingArtifactError(f"checkpoint sidecar missing: {sidecar}")
    meta = json.loads(sidecar.read_text())
    if "dit" in meta.get("configs", {}):
        return LdmSystem.load(checkpoint)[0], "ldm"
    return SimpleSystem.load(checkpoint)[0], "simple"


def cmd_eval(args) -> int:
    declared = EVAL_KEYS[args.protocol]
    extra = []
    if args.mode:
        extra.append(f"mode={args.mode}")
    if args.steps is not None:
        extra.append(f"steps={args.steps}")
    cfg = _resolve(declared, args, extra)
    dataset = Dataset(args.data)
    inst_judge, pitch_judge = evalkit.load_judges(args.judges)
    system, kind = _load_system(args.checkpoint)
    rng = np.random.default_rng(cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    max_examples = cfg.get("max_examples", 0) or None

    if args.protocol == "swap":
        report = evalkit.eval_disentangle_single(
            system, dataset, inst_judge, pitch_judge, rng, cfg["split"], max_examples
        )
        report.save(out / "swap_report.json")
    elif args.protocol == "mixture-render":
        report = evalkit.eval_mixture_render(
            system, dataset, inst_judge, pitch_judge, rng, cfg["split"], max_examples
        )
        report.save(out / "mixture_render_report.json")
    elif args.protocol == "satb-swap":
        if kind != "ldm":
            raise MissingArtifactError("satb-swap needs a diffusion checkpoint")
        report = evalkit.eval_satb_swap(
            system, dataset, inst_judge, pitch_judge, rng,
            mode=cfg["mode"], n_steps=cfg["steps"], split=cfg["split"],
            max_pairs=cfg["max_pairs"] or None,
        )
        report.save(out / "satb_swap_report.json")
    else:  # fed
        if kind != "ldm":
            raise MissingArtifactError("fed needs a diffusion checkpoint")
        report = _fed_report(system, dataset, inst_judge, cfg, rng)
        (out / "fed_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        print(json.dumps(report["summary"], indent=2))
        configio.write_snapshot(out, f"eval {args.protocol}", cfg)
        return EXIT_OK
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    configio.write_snapshot(out, f"eval {args.protocol}", cfg)
    return EXIT_OK


def _fed_report(system, dataset, inst_judge, cfg, rng) -> dict:
    """FED of conditionally sampled sources vs real, plus a noise baseline."""
    split = cfg["split"]
    examples = dataset.examples(split)[: cfg["max_examples"] or None]
    real_mels, real_labels, gen_mels, gen_labels = [], [], [], []
    torch_rng = torch.Generator().manual_seed(cfg["seed"])
    with torch.no_grad():
        for ex in examples:
            queries = [
                torch.from_numpy(dataset.sample_query(inst, split, rng))
                for inst in ex.instrument_ids
            ]
            bundles = system.encoder.encode_sources(
                torch.from_numpy(ex.mixture_mel), queries, phase="eval"
            )
            latents = sample_from_bundles(
                system.dit, system.schedule, bundles, system.grid_shape,
                cfg["steps"], rng=torch_rng, mode="set", patches=system.extras.patches,
            )
            for mel, si in zip(latents_to_mels(system.latent_ae, latents), range(ex.n_sources)):
                gen_mels.append(mel.numpy())
                gen_labels.append(ex.instrument_ids[si])
            for si in range(ex.n_sources):
                real_mels.append(ex.source_mels[si])
                real_labels.append(ex.instrument_ids[si])
    fed = evalkit.frechet_embedding_distance(real_mels, gen_mels, inst_judge, real_labels, gen_labels)
    mel_cfg_d = dataset.manifest["mel"]
    mel_cfg = MelConfig(
        sample_rate=mel_cfg_d["sample_rate"], mel_bands=mel_cfg_d["mel_bands"],
        window=mel_cfg_d["window"], hop=mel_cfg_d["hop"],
    )
    frames = dataset.manifest["frames"]
    noise_rng = np.random.default_rng(cfg["seed"] + 1)
    noise_mels = []
    for _ in range(len(real_mels)):
        wave = 0.1 * noise_rng.standard_normal(frames * mel_cfg.hop)
        noise_mels.append(mel_transform(wave, mel_cfg).data[:, :frames])
    fed_noise = evalkit.frechet_embedding_distance(real_mels, noise_mels, inst_judge)
    return {
        "samples": fed.as_dict(),
        "noise_baseline": fed_noise.as_dict(),
        "summary": {
            "fed_samples": fed.overall_distance,
            "fed_noise": fed_noise.overall_distance,
            "samples_beat_noise": fed.overall_distance < fed_noise.overall_distance,
        },
    }


def cmd_export(args) -> int:
    cfg = _resolve(EXPORT_KEYS[args.kind], args)
    dataset = Dataset(args.data)
    system, kind = _load_system(args.checkpoint)
    rng = np.random.default_rng(cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.kind == "pca":
        taus, labels = evalkit.collect_timbre_latents(
            system, dataset, rng, cfg["split"], cfg["max_examples"] or None
        )
        result = evalkit.export_pca(taus, labels, out / "pca.csv", out / "pca.png")
    elif args.kind == "spectrogram-grid":
        if kind != "simple":
            raise MissingArtifactError("spectrogram-grid exports need a simple-model checkpoint")
        result = evalkit.export_spectrogram_grid(
            system, dataset, rng, out / "spectrogram_grid.png", cfg["split"]
        )
    else:
        if kind != "simple":
            raise MissingArtifactError("residual demo needs a simple-model checkpoint")
        result = evalkit.export_residual_swap_demo(
            system, dataset, rng, out, cfg["split"], identity=cfg["identity"]
        )
    print(json.dumps(result, indent=2, sort_keys=True))
    configio.write_snapshot(out, f"export {args.kind}", cfg)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "datagen":
            return cmd_datagen(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "export":
            return cmd_export(args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifactError, FileNotFoundError) as e:
        print(f"missing dependency: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
