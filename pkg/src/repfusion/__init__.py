"""Diffusion teachers distilled into small students, at desk scale.

Submodules: ``numeric`` (RNG streams, SVD, finite differences), ``autonet``
(parameter stores and hand-written backprop), ``datasets``, ``diffusion``,
``linear_dpm``, ``probe``, ``distill``, ``policy``, ``pipeline`` and ``cli``.
"""

from ._kernels import USE_NUMBA
from .numeric import NumericalError, RngStream

__version__ = "0.1.0"

__all__ = ["NumericalError", "RngStream", "USE_NUMBA", "__version__"]
