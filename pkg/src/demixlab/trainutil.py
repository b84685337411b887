"""Shared training plumbing: metrics stream, checkpoints, clipping, schedules."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import tensorio
from .errors import MissingArtifactError, TrainingDivergedError


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 4e-4
    clip: float = 0.5
    max_steps: int = 2000
    val_interval: int = 100
    patience: int = 5
    seed: int = 0
    warmup_steps: int = 0  # >0 enables linear warmup + cosine decay


def lr_at(step: int, config: TrainConfig) -> float:
    """Constant lr, or linear warmup to `lr` followed by cosine decay."""
    if config.warmup_steps <= 0:
        return config.lr
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    frac = (step - config.warmup_steps) / max(1, config.max_steps - config.warmup_steps)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def clip_gradients(module: torch.nn.Module, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(module.parameters(), max_norm))


def check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss at step {step}")


class MetricsWriter:
    """One JSON object per line, appended."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


class EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_rounds = 0

    def update(self, val: float) -> bool:
        """Returns True when `val` improves on the best seen."""
        if val < self.best:
            self.best = val
            self.bad_rounds = 0
            return True
        self.bad_rounds += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_rounds >= self.patience


def state_dict_tensors(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        f"model.{name}": tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
    }


def optimizer_tensors(optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for i, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                out[f"opt.{i}.{key}"] = value.detach().cpu().numpy().astype(np.float32)
    return out


def save_checkpoint(
    path: str | Path,
    module: torch.nn.Module,
    meta: dict,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    tensors = state_dict_tensors(module)
    if optimizer is not None:
        tensors.update(optimizer_tensors(optimizer))
    tensorio.save_tensors(path, tensors, meta)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(
    path: str | Path,
    module: torch.nn.Module,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    tensors, meta = tensorio.load_tensors(path)
    state = {
        name[len("model.") :]: torch.from_numpy(arr)
        for name, arr in tensors.items()
        if name.startswith("model.")
    }
    reference = module.state_dict()
    module.load_state_dict({k: v.to(reference[k].dtype).reshape(reference[k].shape) for k, v in state.items()})
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        for i in list(opt_state["state"].keys()):
            del opt_state["state"][i]
        groups: dict[int, dict] = {}
        for name, arr in tensors.items():
            if not name.startswith("opt."):
                continue
            _, idx, key = name.split(".", 2)
            entry = groups.setdefault(int(idx), {})
            t = torch.from_numpy(arr)
            entry[key] = t.reshape(()) if key == "step" and t.numel() == 1 else t
        opt_state["state"] = groups
        optimizer.load_state_dict(opt_state)
    return meta
