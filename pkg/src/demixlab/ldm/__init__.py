from .autoencoder import LatentAutoencoder
from .dit import DiT, DiTConfig
from .partition import build_set_condition, partition, sinusoidal_encoding, stack_sources, unpartition
from .sampler import (
    latents_to_mels,
    latents_to_mixture,
    mels_to_mixture,
    sample_from_bundles,
    sample_latents,
    sampling_timesteps,
)
from .schedule import DiffusionSchedule, build_schedule, forward_diffuse
from .training import LdmSystem, LdmTrainExtras, load_latent_ae, train_latent_ae, train_ldm

__all__ = [
    "DiT",
    "DiTConfig",
    "DiffusionSchedule",
    "LatentAutoencoder",
    "LdmSystem",
    "LdmTrainExtras",
    "build_schedule",
    "build_set_condition",
    "forward_diffuse",
    "latents_to_mels",
    "latents_to_mixture",
    "load_latent_ae",
    "mels_to_mixture",
    "partition",
    "sample_from_bundles",
    "sample_latents",
    "sampling_timesteps",
    "sinusoidal_encoding",
    "stack_sources",
    "train_latent_ae",
    "train_ldm",
    "unpartition",
]
