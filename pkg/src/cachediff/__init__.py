"""Desk-scale diffusion inference engine.

Implements a deterministic toy video UNet together with three inference
accelerations: decoder feature caching with parallel noise prediction and
input-latents estimation, foreground-restricted attention with background
caching, and reference-feature removal.  Everything runs on float32 numpy
arrays with optional numba kernels; results are bit-identical across both
backends.
"""

__version__ = "0.1.0"

from .errors import CacheMissError, ConfigError, InvariantError

__all__ = ["CacheMissError", "ConfigError", "InvariantError", "__version__"]
