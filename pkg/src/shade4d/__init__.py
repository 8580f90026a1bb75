"""shade4d: dynamic-scene reconstruction with deformable tri-planes,
spherical-harmonic attention radiance, and latent diffusion refinement."""

__version__ = "0.1.0"
