from .chorales import ChoraleConfig, N_PITCH_CLASSES, REST_CLASS
from .chords import ChordConfig
from .instruments import CHORALE_INSTRUMENTS, CHORD_INSTRUMENTS, Envelope, InstrumentSpec
from .mel import LOG_FLOOR, MelConfig, MelSpectrogram, mel_band_centers, mel_filterbank, mel_transform
from .store import Dataset, MixtureExample, manifest_hash
from .synthesis import NoteEvent, SynthConfig, midi_to_hz, synth_source

__all__ = [
    "ChoraleConfig",
    "ChordConfig",
    "CHORALE_INSTRUMENTS",
    "CHORD_INSTRUMENTS",
    "Dataset",
    "Envelope",
    "InstrumentSpec",
    "LOG_FLOOR",
    "MelConfig",
    "MelSpectrogram",
    "MixtureExample",
    "N_PITCH_CLASSES",
    "NoteEvent",
    "REST_CLASS",
    "SynthConfig",
    "manifest_hash",
    "mel_band_centers",
    "mel_filterbank",
    "mel_transform",
    "midi_to_hz",
    "synth_source",
]
