"""Joint forecasting of future action labels and characteristic 3D poses.

Trains an autoregressive generator from 2D pose sequences only, using a
differentiable camera projection for weak supervision and a Wasserstein
critic over an uncorrelated 3D pose database for 3D regularization.
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
