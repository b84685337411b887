"""Binary container for named float32 tensors ("DSMX" format).

Shard layout: magic ``DSMX``, u32 LE version, u32 LE example count, then per
example a u32-length-prefixed UTF-8 JSON metadata blob followed by its named
tensors. Each tensor: u16 LE name length, name bytes, u8 rank, rank x u32 LE
dims, raw f32 LE data. The metadata key ``"tensors"`` lists the tensor names
in file order so the reader knows how many records to consume.

Checkpoints reuse the same tensor encoding with an example count of 1 and a
single metadata blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSMX"
VERSION = 1


def _dump_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    if len(name_b) > 0xFFFF:
        raise ValueError(f"tensor name too long: {name!r}")
    if data.ndim > 0xFF:
        raise ValueError(f"tensor rank too large: {data.ndim}")
    f.write(struct.pack("<H", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<B", data.ndim))
    for d in data.shape:
        f.write(struct.pack("<I", d))
    f.write(data.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated DSMX file")
    return buf


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(f, 1))
    dims = [struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(dims)
    return name, data.copy()


def write_shard(path: str | Path, examples: list[tuple[dict, list[tuple[str, np.ndarray]]]]) -> None:
    """Write a list of (metadata, [(name, tensor), ...]) examples."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(examples)))
        for meta, tensors in examples:
            meta = dict(meta)
            meta["tensors"] = [name for name, _ in tensors]
            blob = _dump_meta(meta)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for name, arr in tensors:
                _write_tensor(f, name, arr)


def read_shard(path: str | Path) -> list[tuple[dict, dict[str, np.ndarray]]]:
    path = Path(path)
    out = []
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise ValueError(f"{path}: not a DSMX file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported DSMX version {version}")
        (n_examples,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(n_examples):
            (blob_len,) = struct.unpack("<I", _read_exact(f, 4))
            meta = json.loads(_read_exact(f, blob_len).decode("utf-8"))
            tensors = {}
            for _ in meta["tensors"]:
                name, arr = _read_tensor(f)
                tensors[name] = arr
            out.append((meta, tensors))
    return out


def shard_example_count(path: str | Path) -> int:
    """Read only the header count (manifest validation)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise ValueError(f"{path}: not a DSMX file")
        _read_exact(f, 4)
        (n,) = struct.unpack("<I", _read_exact(f, 4))
    return n


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Checkpoint-style container: one example holding all named tensors."""
    items = sorted(tensors.items())
    write_shard(path, [(meta or {}, items)])


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    examples = read_shard(path)
    if len(examples) != 1:
        raise ValueError(f"{path}: expected a single-example tensor container")
    meta, tensors = examples[0]
    return tensors, meta
