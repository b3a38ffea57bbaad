"""Flow-map operator learning for two-component reaction-diffusion systems on the torus."""

__version__ = "0.1.0"
