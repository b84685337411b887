"""Log-mel spectrogram frontend (and its rough inverse for audio export).

Framing pads ``window // 2`` zeros on the left and as needed on the right so
the frame count is exactly ``ceil(len(x) / hop)``; frame k is centred on
sample ``k * hop``. A 0.32 s chord segment at hop 512 therefore yields 10
frames and a 4 s chorale segment at hop 160 yields 400.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError

LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    mel_bands: int = 128
    window: int = 1024
    hop: int = 512
    fmin: float = 0.0
    fmax: float | None = None  # defaults to Nyquist

    @property
    def f_upper(self) -> float:
        return self.fmax if self.fmax is not None else self.sample_rate / 2.0


@dataclass(frozen=True)
class MelSpectrogram:
    data: np.ndarray  # [mel_bands, frames], float32 log-amplitude
    sample_rate: int
    hop: int
    window: int
    mel_bands: int

    @property
    def frames(self) -> int:
        return self.data.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(config: MelConfig) -> np.ndarray:
    """Centre frequencies (Hz) of the triangular filters."""
    edges = mel_to_hz(
        np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.f_upper), config.mel_bands + 2)
    )
    return edges[1:-1]


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """[mel_bands, 1 + window//2] peak-one triangular filters on the mel scale."""
    n_bins = config.window // 2 + 1
    fft_freqs = np.arange(n_bins, dtype=np.float64) * config.sample_rate / config.window
    edges = mel_to_hz(
        np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.f_upper), config.mel_bands + 2)
    )
    fb = np.zeros((config.mel_bands, n_bins), dtype=np.float64)
    for m in range(config.mel_bands):
        lo, ctr, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def _frame(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    n_frames = math.ceil(len(x) / hop)
    pad_left = window // 2
    needed = (n_frames - 1) * hop + window
    padded = np.concatenate(
        [np.zeros(pad_left), x, np.zeros(max(0, needed - pad_left - len(x)))]
    )
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def magnitude_stft(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    frames = _frame(np.asarray(x, dtype=np.float64), window, hop)
    win = np.hanning(window)
    return np.abs(np.fft.rfft(frames * win, axis=1)).T  # [bins, frames]


def mel_transform(waveform: np.ndarray, config: MelConfig) -> MelSpectrogram:
    waveform = np.asarray(waveform, dtype=np.float64)
    if not np.all(np.isfinite(waveform)):
        raise ShapeError("waveform contains non-finite values")
    if len(waveform) < config.window:
        raise ShapeError(
            f"waveform length {len(waveform)} shorter than one window ({config.window})"
        )
    mag = magnitude_stft(waveform, config.window, config.hop)
    mel = mel_filterbank(config) @ mag
    logmel = np.log(LOG_FLOOR + mel).astype(np.float32)
    return MelSpectrogram(
        data=logmel,
        sample_rate=config.sample_rate,
        hop=config.hop,
        window=config.window,
        mel_bands=config.mel_bands,
    )


def mel_to_linear(logmel: np.ndarray) -> np.ndarray:
    """Invert the log, recovering non-negative linear-amplitude mel cells."""
    return np.clip(np.exp(np.asarray(logmel, dtype=np.float64)) - LOG_FLOOR, 0.0, None)


def linear_to_logmel(linear: np.ndarray) -> np.ndarray:
    return np.log(LOG_FLOOR + np.asarray(linear, dtype=np.float64)).astype(np.float32)


def mel_to_waveform(logmel: np.ndarray, config: MelConfig, n_iter: int = 32) -> np.ndarray:
    """Classical phase-retrieval inversion (pseudo-inverse filterbank + iterated
    STFT phase re-estimation). Quality is export-grade only."""
    fb = mel_filterbank(config)
    mag = np.clip(np.linalg.pinv(fb) @ mel_to_linear(logmel), 0.0, None)
    n_frames = mag.shape[1]
    window, hop = config.window, config.hop
    length = n_frames * hop
    win = np.hanning(window)
    rng = np.random.default_rng(0)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))

    def istft(spec):
        frames = np.fft.irfft(spec.T, n=window, axis=1) * win
        out = np.zeros((n_frames - 1) * hop + window)
        norm = np.zeros_like(out)
        for k in range(n_frames):
            out[k * hop : k * hop + window] += frames[k]
            norm[k * hop : k * hop + window] += win**2
        out /= np.maximum(norm, 1e-8)
        pad_left = window // 2
        return out[pad_left : pad_left + length]

    x = istft(mag * phase)
    for _ in range(n_iter):
        stft_x = np.fft.rfft(_frame(x, window, hop) * win, axis=1).T[:, :n_frames]
        x = istft(mag * np.exp(1j * np.angle(stft_x)))
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x /= peak
    return x
