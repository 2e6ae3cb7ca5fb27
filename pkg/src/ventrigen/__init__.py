"""ventrigen: ventricle-conditioned latent diffusion for synthetic segmentation data."""

__version__ = "0.1.0"
