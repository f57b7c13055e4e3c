"""Manifold-valued convolution networks on SPD and sphere images."""

from .errors import MvcError
from .manifolds import Manifold, ManifoldPoint, Spd, Sphere, TangentVector, IsometryAction, manifold_from

__version__ = "0.1.0"

__all__ = [
    "MvcError",
    "Manifold",
    "ManifoldPoint",
    "Spd",
    "Sphere",
    "TangentVector",
    "IsometryAction",
    "manifold_from",
    "__version__",
]
