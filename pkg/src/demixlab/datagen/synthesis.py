"""Additive synthesis of note events into source waveforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataGenError
from .instruments import InstrumentSpec


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = 16000
    duration: float = 0.4  # rendered segment length, seconds
    pitch_lo: int = 36
    pitch_hi: int = 87  # inclusive


@dataclass(frozen=True)
class NoteEvent:
    pitch: int  # MIDI number
    onset: float  # seconds
    duration: float  # seconds
    instrument: int  # InstrumentSpec id


def midi_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def adsr_envelope(t: np.ndarray, onset: float, duration: float, env) -> np.ndarray:
    """Piecewise-linear ADSR; sustain holds until `duration` after onset."""
    rel = np.clip(t - onset, 0.0, None)
    a, d, s, r = env.attack, env.decay, env.sustain, env.release
    out = np.zeros_like(t)
    if a > 0:
        out = np.where(rel < a, rel / a, out)
    mask_d = (rel >= a) & (rel < a + d)
    if d > 0:
        out = np.where(mask_d, 1.0 - (1.0 - s) * (rel - a) / d, out)
    out = np.where((rel >= a + d) & (rel < duration), s, out)
    mask_r = (rel >= max(duration, a + d)) & (rel < duration + r)
    if r > 0:
        out = np.where(mask_r, s * (1.0 - (rel - duration) / r), out)
    out = np.where(t < onset, 0.0, out)
    return np.clip(out, 0.0, 1.0)


def render_note(event: NoteEvent, spec: InstrumentSpec, config: SynthConfig) -> np.ndarray:
    n = int(round(config.duration * config.sample_rate))
    wave = np.zeros(n, dtype=np.float64)
    # the envelope vanishes outside [onset, onset + duration + release)
    lo = max(0, int(np.floor(event.onset * config.sample_rate)))
    hi = min(n, int(np.ceil((event.onset + event.duration + spec.envelope.release) * config.sample_rate)) + 1)
    if lo >= hi:
        return wave
    t = np.arange(lo, hi, dtype=np.float64) / config.sample_rate
    f0 = midi_to_hz(event.pitch)
    nyquist = config.sample_rate / 2.0
    seg = np.zeros(hi - lo, dtype=np.float64)
    for k, amp in enumerate(spec.partial_amplitudes):
        if amp == 0.0:
            continue
        offset = spec.inharmonicity[k] if spec.inharmonicity else 0.0
        freq = f0 * (k + 1 + offset)
        if freq >= nyquist:
            continue
        seg += amp * np.sin(2.0 * np.pi * freq * (t - event.onset))
    seg *= adsr_envelope(t, event.onset, event.duration, spec.envelope)
    wave[lo:hi] = seg
    return wave


def synth_source(
    events: list[NoteEvent], spec: InstrumentSpec, config: SynthConfig
) -> np.ndarray:
    """Render one instrument's notes and peak-normalise the sum to <= 1."""
    if not events:
        raise DataGenError("source has no note events")
    for ev in events:
        if ev.instrument != spec.id:
            raise DataGenError(f"event instrument {ev.instrument} != spec id {spec.id}")
        if not config.pitch_lo <= ev.pitch <= config.pitch_hi:
            raise DataGenError(
                f"pitch {ev.pitch} outside range [{config.pitch_lo}, {config.pitch_hi}]"
            )
        if ev.duration <= 0:
            raise DataGenError("note duration must be > 0")
    wave = np.zeros(int(round(config.duration * config.sample_rate)), dtype=np.float64)
    for ev in events:
        wave += render_note(ev, spec, config)
    peak = np.max(np.abs(wave))
    if peak > 1.0:
        wave /= peak
    return wave
