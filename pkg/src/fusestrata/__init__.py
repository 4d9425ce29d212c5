"""Multimodal 3D separable-convolution autoencoder and embedding stratification pipeline."""
from ._jit import USE_NUMBA

__version__ = "0.1.0"
__all__ = ["USE_NUMBA", "__version__"]
