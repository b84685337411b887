"""Four-part chorale-like mixtures: constrained random-walk melodies."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from . import store
from .instruments import CHORALE_INSTRUMENTS, DEFAULT_PART_POOLS, InstrumentSpec, instrument_table
from .mel import MelConfig, mel_transform
from .synthesis import NoteEvent, SynthConfig, synth_source

REST_CLASS = 128
N_PITCH_CLASSES = 129  # MIDI 0..127 plus rest

DEFAULT_PART_RANGES: dict[str, tuple[int, int]] = {
    "S": (60, 81),
    "A": (53, 74),
    "T": (47, 69),
    "B": (36, 62),
}


@dataclass(frozen=True)
class ChoraleConfig:
    n_examples: int = 600
    seed: int = 0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    parts: tuple[str, ...] = ("S", "A", "T", "B")
    part_ranges: dict[str, tuple[int, int]] = field(
        default_factory=lambda: dict(DEFAULT_PART_RANGES)
    )
    part_pools: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: dict(DEFAULT_PART_POOLS)
    )
    segment_seconds: float = 4.0
    durations: tuple[float, ...] = (0.25, 0.5, 1.0)
    rest_prob: float = 0.05
    step_choices: tuple[int, ...] = (-2, -1, 0, 1, 2)
    mel: MelConfig = field(default_factory=lambda: MelConfig(mel_bands=64, window=1024, hop=160))
    instruments: tuple[InstrumentSpec, ...] = CHORALE_INSTRUMENTS

    @property
    def frames(self) -> int:
        return int(round(self.segment_seconds * self.mel.sample_rate / self.mel.hop))


def random_walk_melody(
    rng: np.random.Generator, lo: int, hi: int, config: ChoraleConfig
) -> list[tuple[int | None, float, float]]:
    """(pitch or None for rest, onset, duration) covering the segment."""
    events = []
    t = 0.0
    pitch = int(rng.integers(lo, hi + 1))
    while t < config.segment_seconds:
        dur = float(rng.choice(config.durations))
        dur = min(dur, config.segment_seconds - t)
        if rng.random() < config.rest_prob:
            events.append((None, t, dur))
        else:
            step = int(rng.choice(config.step_choices))
            pitch = int(np.clip(pitch + step, lo, hi))
            events.append((pitch, t, dur))
        t += dur
    return events


def melody_annotation(
    melody: list[tuple[int | None, float, float]], config: ChoraleConfig
) -> np.ndarray:
    """Framewise one-hot [129, frames]; frame k is sampled at k * hop / sr."""
    ann = np.zeros((N_PITCH_CLASSES, config.frames), dtype=np.float32)
    sr, hop = config.mel.sample_rate, config.mel.hop
    for k in range(config.frames):
        t = k * hop / sr
        cls = REST_CLASS
        for pitch, onset, dur in melody:
            if onset <= t < onset + dur:
                cls = REST_CLASS if pitch is None else pitch
                break
        ann[cls, k] = 1.0
    return ann


def generate_example(config: ChoraleConfig, index: int, return_waveforms: bool = False):
    rng = np.random.default_rng([config.seed, index])
    synth = SynthConfig(
        sample_rate=config.mel.sample_rate,
        duration=config.segment_seconds,
        pitch_lo=0,
        pitch_hi=127,
    )
    waves, annotations, inst_ids, part_labels, pitch_lists = [], [], [], [], []
    for part in config.parts:
        pool = config.part_pools.get(part, ())
        if not pool:
            raise ConfigError(f"instrument pool for part {part!r} is empty")
        lo, hi = config.part_ranges[part]
        melody = random_walk_melody(rng, lo, hi, config)
        inst = int(pool[int(rng.integers(len(pool)))])
        events = [
            NoteEvent(pitch=p, onset=o, duration=d, instrument=inst)
            for p, o, d in melody
            if p is not None
        ]
        if not events:  # all-rest walk; keep one inaudible filler note
            events = [NoteEvent(pitch=lo, onset=0.0, duration=1e-3, instrument=inst)]
        waves.append(synth_source(events, config.instruments[inst], synth))
        annotations.append(melody_annotation(melody, config))
        inst_ids.append(inst)
        part_labels.append(part)
        pitch_lists.append(sorted({p for p, _, _ in melody if p is not None}))

    mixture_wave = np.sum(waves, axis=0)
    n = config.frames

    def mel(w):
        return mel_transform(w, config.mel).data[:, :n]

    example = store.MixtureExample(
        mixture_mel=mel(mixture_wave),
        source_mels=[mel(w) for w in waves],
        annotations=annotations,
        instrument_ids=inst_ids,
        part_labels=part_labels,
        seed=index,
        pitches=pitch_lists,
    )
    if return_waveforms:
        return example, waves, mixture_wave
    return example


def generate_dataset(config: ChoraleConfig, out_dir: str | Path) -> Path:
    if config.n_examples <= 0:
        raise ConfigError("n_examples must be positive")
    sizes = store.split_sizes(config.n_examples, config.split)
    examples = [generate_example(config, i) for i in range(config.n_examples)]
    by_split = {
        "train": examples[: sizes["train"]],
        "val": examples[sizes["train"] : sizes["train"] + sizes["val"]],
        "test": examples[sizes["train"] + sizes["val"] :],
    }
    extra = {
        "split_ratios": list(config.split),
        "global_seed": config.seed,
        "parts": list(config.parts),
        "part_ranges": {p: list(r) for p, r in config.part_ranges.items()},
        "part_pools": {p: list(config.part_pools[p]) for p in config.parts},
        "n_pitches": N_PITCH_CLASSES,
        "rest_class": REST_CLASS,
        "mel": {
            "sample_rate": config.mel.sample_rate,
            "mel_bands": config.mel.mel_bands,
            "window": config.mel.window,
            "hop": config.mel.hop,
        },
        "frames": config.frames,
        "segment_seconds": config.segment_seconds,
        "instruments": instrument_table(config.instruments),
    }
    return store.write_dataset(out_dir, "chorales", by_split, extra)
