"""One-dimensional base kernels and their product composition."""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

__all__ = [
    "KernelFamily",
    "BaseKernel1D",
    "ProductKernel",
    "eval_1d",
    "cross_cov_1d",
    "eval_product",
]


class KernelFamily(str, enum.Enum):
    SQUARED_EXPONENTIAL = "squared_exponential"


@dataclass(frozen=True)
class BaseKernel1D:
    lengthscale: float
    amplitude: float = 1.0
    family: KernelFamily = KernelFamily.SQUARED_EXPONENTIAL

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be > 0, got {self.lengthscale}")
        if not self.amplitude > 0:
            raise ValueError(f"amplitude must be > 0, got {self.amplitude}")
        object.__setattr__(self, "family", KernelFamily(self.family))


@dataclass(frozen=True)
class ProductKernel:
    """``k(x, z) = prod_i k_i(x_i, z_i)``."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(self.dims)
        if not dims:
            raise DimensionError("ProductKernel needs at least one dimension")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_hypers(cls, lengthscales, variance=1.0, family="squared_exponential"):
        """SE-ARD style construction.

        The total signal variance is split evenly in log space, each factor
        getting ``variance ** (1/d)``, so the product has amplitude ``variance``.
        """
        lengthscales = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        amp = float(variance) ** (1.0 / lengthscales.size)
        return cls(tuple(BaseKernel1D(float(l), amp, family) for l in lengthscales))

    @property
    def d(self):
        return len(self.dims)

    @property
    def lengthscales(self):
        return np.array([k.lengthscale for k in self.dims])

    @property
    def variance(self):
        return float(np.prod([k.amplitude for k in self.dims]))

    def gram(self, X, Z=None):
        """Dense kernel matrix; the exact-kernel reference used for checks."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = X if Z is None else np.atleast_2d(np.asarray(Z, dtype=float))
        if X.shape[1] != self.d or Z.shape[1] != self.d:
            raise DimensionError(
                f"inputs have {X.shape[1]} and {Z.shape[1]} columns, kernel has d={self.d}"
            )
        K = np.ones((X.shape[0], Z.shape[0]))
        for i, k in enumerate(self.dims):
            K *= cross_cov_1d(k, X[:, i], Z[:, i])
        return K


def eval_1d(kern: BaseKernel1D, a, b):
    r = (a - b) / kern.lengthscale
    return kern.amplitude * np.exp(-0.5 * r * r)


def cross_cov_1d(kern: BaseKernel1D, xs, us):
    """``n x m`` matrix of ``eval_1d(kern, xs[j], us[l])``."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    us = np.asarray(us, dtype=float).reshape(-1)
    return eval_1d(kern, xs[:, None], us[None, :])


def eval_product(kern: ProductKernel, x, z):
    x = np.asarray(x, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    if x.size != kern.d or z.size != kern.d:
        raise DimensionError(
            f"points have lengths {x.size} and {z.size}, kernel has d={kern.d}"
        )
    out = 1.0
    for k, a, b in zip(kern.dims, x, z):
        out *= float(eval_1d(k, a, b))
    return out
