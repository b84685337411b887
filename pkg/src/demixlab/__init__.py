"""demixlab: per-source pitch/timbre disentanglement of instrument mixtures,
with an autoencoding decoder, a set-conditioned latent-diffusion transformer
decoder, and the attribute-swap evaluation protocols."""

__version__ = "0.1.0"
