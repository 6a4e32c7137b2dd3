"""voxfuse: incremental volumetric mapping with per-voxel latent codes."""

__version__ = "0.1.0"
