"""Woodbury-applied ``(Phi W Phi' + sigma^2 I)^-1`` as a preconditioner for
exact kernel systems, and a preconditioned conjugate gradient solver."""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError
from .model import ModelState, PFactor

__all__ = ["WoodburyApplier", "woodbury_apply", "PCGResult", "pcg_solve"]


class WoodburyApplier:
    """Applies ``(Phi W Phi' + sigma^2 I)^-1`` in ``O(np + p^2)`` per vector.

    Setup factorizes ``P = sigma^2 W^-1 + Phi'Phi`` once (``O(np^2 + p^3)``).
    """

    def __init__(self, phi, w, sigma2):
        self.phi = np.asarray(phi, dtype=float)
        if self.phi.ndim != 2:
            raise DimensionError(f"Phi must be 2-D, got shape {self.phi.shape}")
        self.sigma2 = float(sigma2)
        w = np.broadcast_to(np.asarray(w, dtype=float), (self.phi.shape[1],)).copy()
        self.state = ModelState(w, self.sigma2)
        self._factor = PFactor(self.phi.T @ self.phi, self.state)

    @property
    def n(self):
        return self.phi.shape[0]

    def __call__(self, v):
        return woodbury_apply(self, v)


def woodbury_apply(applier: WoodburyApplier, v):
    """``sigma^-2 (v - Phi P^-1 Phi' v)``; ``v`` may be a vector or n x k block."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != applier.n:
        raise DimensionError(f"vector has length {v.shape[0]}, expected n={applier.n}")
    phi = applier.phi
    return (v - phi @ applier._factor.solve(phi.T @ v)) / applier.sigma2


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residuals: np.ndarray = field(repr=False)


def pcg_solve(K, sigma2, applier=None, b=None, tol=1e-8, max_iters=1000,
              callback: Optional[Callable] = None) -> PCGResult:
    """Solve ``(K + sigma^2 I) x = b`` by preconditioned conjugate gradients.

    Parameters
    ----------
    K : ndarray or callable
        Dense symmetric PSD matrix, or a function returning ``K @ v``.
    applier : callable, optional
        Preconditioner ``M^-1``; ``None`` gives plain CG.
    tol : float
        Stop when ``||b - (K + sigma^2 I) x|| / ||b|| <= tol`` (recurrence
        residual).

    Returns
    -------
    PCGResult
        ``residuals`` holds the relative residual after each iteration
        (index 0 is the starting residual). ``converged`` is False when
        ``max_iters`` ran out; ``x`` is then the last iterate.
    """
    if b is None:
        raise ValueError("right-hand side b is required")
    b = np.asarray(b, dtype=float).reshape(-1)
    matvec = (lambda v: K @ v) if isinstance(K, np.ndarray) else K
    if isinstance(K, np.ndarray) and K.shape != (b.size, b.size):
        raise DimensionError(f"K has shape {K.shape}, expected ({b.size}, {b.size})")
    precond = (lambda v: v) if applier is None else applier

    def A(v):
        return matvec(v) + sigma2 * v

    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0:
        return PCGResult(x, 0, True, np.zeros(1))
    r = b.copy()
    z = precond(r)
    d = z.copy()
    rz = r @ z
    history = [1.0]
    for it in range(1, max_iters + 1):
        Ad = A(d)
        alpha = rz / (d @ Ad)
        x = x + alpha * d
        r = r - alpha * Ad
        rel = np.linalg.norm(r) / bnorm
        history.append(rel)
        if callback is not None:
            callback(x)
        if rel <= tol:
            return PCGResult(x, it, True, np.array(history))
        z = precond(r)
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    return PCGResult(x, max_iters, False, np.array(history))
