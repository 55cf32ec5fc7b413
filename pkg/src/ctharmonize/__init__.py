"""CT reconstruction-kernel standardisation with a UNet++ autoencoder and latent diffusion."""
__version__ = "0.1.0"
