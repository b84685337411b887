"""Toy mel-spectrogram latent autoencoder.

Stands in for a large pretrained VAE: maps 64 x 400 log-mels to an
8 x 100 x 16 latent grid and back. Trained separately with plain MSE and
then frozen while the diffusion stack learns.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from ..encoders import GridDecoder, GridEncoder
from ..errors import ShapeError


class LatentAutoencoder(nn.Module):
    def __init__(self, width: int = 32, channels: int = 8, mel_bands: int = 64, mel_frames: int = 400):
        super().__init__()
        self.encoder = GridEncoder(width, channels)
        self.decoder = GridDecoder(width, channels)
        self.mel_bands = mel_bands
        self.mel_frames = mel_frames
        self.channels = channels

    def encode(self, mel: torch.Tensor) -> torch.Tensor:
        """[B, bands, T] or [bands, T] -> latent grid [B?, C, T/4, bands/4]."""
        single = mel.dim() == 2
        x = mel.unsqueeze(0) if single else mel
        if x.shape[-2] != self.mel_bands or x.shape[-1] != self.mel_frames:
            raise ShapeError(
                f"mel shape {tuple(x.shape[-2:])} != {self.mel_bands}x{self.mel_frames}"
            )
        z = self.encoder(x)
        return z.squeeze(0) if single else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        single = z.dim() == 3
        x = z.unsqueeze(0) if single else z
        if x.shape[1] != self.channels:
            raise ShapeError(f"latent has {x.shape[1]} channels, expected {self.channels}")
        mel = self.decoder(x)
        return mel.squeeze(0) if single else mel

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(mel))
