"""dalipd: conditioned latent-diffusion generator for circuit-layout heatmaps."""

__version__ = "0.1.0"
