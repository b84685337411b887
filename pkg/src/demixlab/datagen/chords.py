"""Chord-mixture dataset: 3-4 simultaneous notes spread over 3 timbres."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from . import store
from .instruments import CHORD_INSTRUMENTS, InstrumentSpec, instrument_table
from .mel import MelConfig, mel_transform
from .synthesis import NoteEvent, SynthConfig, synth_source


@dataclass(frozen=True)
class ChordConfig:
    n_examples: int = 3000
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.2, 0.1)
    pitch_lo: int = 36
    pitch_hi: int = 87  # inclusive; 52 pitch classes
    notes_lo: int = 3
    notes_hi: int = 4
    render_seconds: float = 0.4
    crop_start: int = 3  # first mel frame kept (past the attack/decay)
    frames: int = 10
    mel: MelConfig = field(default_factory=lambda: MelConfig(mel_bands=128, window=1024, hop=512))
    instruments: tuple[InstrumentSpec, ...] = CHORD_INSTRUMENTS

    @property
    def n_pitches(self) -> int:
        return self.pitch_hi - self.pitch_lo + 1


def pitch_to_bin(pitch: int, config: ChordConfig) -> int:
    return pitch - config.pitch_lo


def generate_example(config: ChordConfig, index: int, return_waveforms: bool = False):
    """Pure function of (config, index); parallel-safe."""
    rng = np.random.default_rng([config.seed, index])
    n_notes = int(rng.integers(config.notes_lo, config.notes_hi + 1))
    pitches = rng.choice(
        np.arange(config.pitch_lo, config.pitch_hi + 1), size=n_notes, replace=False
    )
    inst_ids = rng.integers(0, len(config.instruments), size=n_notes)
    synth = SynthConfig(
        sample_rate=config.mel.sample_rate,
        duration=config.render_seconds,
        pitch_lo=config.pitch_lo,
        pitch_hi=config.pitch_hi,
    )
    note_seconds = config.render_seconds - 0.02  # leave room for the release tail

    by_instrument: dict[int, list[NoteEvent]] = {}
    for pitch, inst in zip(pitches.tolist(), inst_ids.tolist()):
        by_instrument.setdefault(inst, []).append(
            NoteEvent(pitch=pitch, onset=0.0, duration=note_seconds, instrument=inst)
        )

    source_ids = sorted(by_instrument)
    waves = [synth_source(by_instrument[i], config.instruments[i], synth) for i in source_ids]
    mixture_wave = np.sum(waves, axis=0)

    lo, hi = config.crop_start, config.crop_start + config.frames

    def crop_mel(w):
        return mel_transform(w, config.mel).data[:, lo:hi]

    annotations = []
    for i in source_ids:
        ann = np.zeros(config.n_pitches, dtype=np.float32)
        for ev in by_instrument[i]:
            ann[pitch_to_bin(ev.pitch, config)] = 1.0
        annotations.append(ann)

    example = store.MixtureExample(
        mixture_mel=crop_mel(mixture_wave),
        source_mels=[crop_mel(w) for w in waves],
        annotations=annotations,
        instrument_ids=source_ids,
        part_labels=None,
        seed=index,
        pitches=[sorted(ev.pitch for ev in by_instrument[i]) for i in source_ids],
    )
    if return_waveforms:
        return example, waves, mixture_wave
    return example


def generate_dataset(config: ChordConfig, out_dir: str | Path) -> Path:
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
        "pitch_range": [config.pitch_lo, config.pitch_hi],
        "n_pitches": config.n_pitches,
        "mel": {
            "sample_rate": config.mel.sample_rate,
            "mel_bands": config.mel.mel_bands,
            "window": config.mel.window,
            "hop": config.mel.hop,
        },
        "frames": config.frames,
        "crop_start": config.crop_start,
        "render_seconds": config.render_seconds,
        "instruments": instrument_table(config.instruments),
    }
    return store.write_dataset(out_dir, "chords", by_split, extra)
