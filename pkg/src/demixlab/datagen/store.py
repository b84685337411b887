"""Dataset persistence: sharded examples, manifest, and query sampling."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensorio
from ..errors import ConfigError, LookupError_, MissingArtifactError

SHARD_SIZE = 512
SPLITS = ("train", "val", "test")


@dataclass
class MixtureExample:
    mixture_mel: np.ndarray  # [bands, frames]
    source_mels: list[np.ndarray]
    annotations: list[np.ndarray]  # multi-hot [N_p] or framewise [N_p, T_p]
    instrument_ids: list[int]
    part_labels: list[str] | None
    seed: int
    pitches: list[list[int]] = field(default_factory=list)

    @property
    def n_sources(self) -> int:
        return len(self.source_mels)


def _example_records(ex: MixtureExample) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    meta = {
        "instrument_ids": list(ex.instrument_ids),
        "part_labels": list(ex.part_labels) if ex.part_labels else None,
        "seed": ex.seed,
        "pitches": ex.pitches,
        "n_sources": ex.n_sources,
    }
    tensors = [("mixture_mel", ex.mixture_mel)]
    for i, (mel, ann) in enumerate(zip(ex.source_mels, ex.annotations)):
        tensors.append((f"source_mel_{i}", mel))
        tensors.append((f"annotation_{i}", ann))
    return meta, tensors


def _example_from_records(meta: dict, tensors: dict[str, np.ndarray]) -> MixtureExample:
    n = meta["n_sources"]
    return MixtureExample(
        mixture_mel=tensors["mixture_mel"],
        source_mels=[tensors[f"source_mel_{i}"] for i in range(n)],
        annotations=[tensors[f"annotation_{i}"] for i in range(n)],
        instrument_ids=meta["instrument_ids"],
        part_labels=meta["part_labels"],
        seed=meta["seed"],
        pitches=meta.get("pitches", []),
    )


def split_sizes(n: int, ratios: tuple[float, float, float]) -> dict[str, int]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return {"train": n_train, "val": n_val, "test": n - n_train - n_val}


def write_dataset(
    out_dir: str | Path,
    kind: str,
    examples_by_split: dict[str, list[MixtureExample]],
    manifest_extra: dict,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shard_list = []
    for split in SPLITS:
        examples = examples_by_split.get(split, [])
        for shard_idx in range(0, max(1, len(examples)), SHARD_SIZE):
            chunk = examples[shard_idx : shard_idx + SHARD_SIZE]
            if not chunk and shard_idx > 0:
                break
            name = f"{split}_{shard_idx // SHARD_SIZE:04d}.dsmx"
            tensorio.write_shard(out_dir / name, [_example_records(ex) for ex in chunk])
            shard_list.append({"file": name, "split": split, "count": len(chunk)})
    manifest = {
        "version": 1,
        "kind": kind,
        "counts": {s: len(examples_by_split.get(s, [])) for s in SPLITS},
        "shards": shard_list,
        **manifest_extra,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir / "manifest.json"


def manifest_hash(manifest_path: str | Path) -> str:
    """Hash of the manifest plus all shard bytes (reproducibility checks)."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256(manifest_path.read_bytes())
    manifest = json.loads(manifest_path.read_text())
    for entry in manifest["shards"]:
        h.update((manifest_path.parent / entry["file"]).read_bytes())
    return h.hexdigest()


class Dataset:
    """In-memory view over a generated dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise MissingArtifactError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        self._splits: dict[str, list[MixtureExample]] = {s: [] for s in SPLITS}
        for entry in self.manifest["shards"]:
            path = self.root / entry["file"]
            if not path.exists():
                raise MissingArtifactError(f"shard listed in manifest missing: {path}")
            records = tensorio.read_shard(path)
            if len(records) != entry["count"]:
                raise ConfigError(
                    f"shard {path} holds {len(records)} examples, manifest says {entry['count']}"
                )
            self._splits[entry["split"]].extend(
                _example_from_records(m, t) for m, t in records
            )
        # (example_idx, source_idx) pools per instrument, per split
        self._query_index: dict[str, dict[int, list[tuple[int, int]]]] = {}
        for split, examples in self._splits.items():
            index: dict[int, list[tuple[int, int]]] = {}
            for ei, ex in enumerate(examples):
                for si, inst in enumerate(ex.instrument_ids):
                    index.setdefault(inst, []).append((ei, si))
            self._query_index[split] = index

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    def examples(self, split: str) -> list[MixtureExample]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return self._splits[split]

    def instruments_in(self, split: str) -> list[int]:
        return sorted(self._query_index[split])

    def query_pool(self, instrument_id: int, split: str) -> list[tuple[int, int]]:
        pool = self._query_index[split].get(instrument_id)
        if not pool:
            raise LookupError_(f"instrument {instrument_id} absent from split {split!r}")
        return pool

    def sample_query(
        self, instrument_id: int, split: str, rng: np.random.Generator
    ) -> np.ndarray:
        """Mel of a random source played by `instrument_id` in `split`."""
        pool = self.query_pool(instrument_id, split)
        ei, si = pool[int(rng.integers(len(pool)))]
        return self._splits[split][ei].source_mels[si]
