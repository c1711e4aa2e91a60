"""Log marginal likelihood, its derivatives and the posterior for the
re-weighted eigenfunction kernel ``k(x, z) = sum_i w_i phi_i(x) phi_i(z)``.

Everything is expressed through the precomputed statistics ``y'y``,
``r = Phi'y`` and ``A = Phi'Phi`` and the p x p matrix
``P = sigma^2 W^-1 + A``, so no n x n matrix is ever formed.

``P`` is factorized in the congruent form ``B = sigma^2 I + L'AL`` with
``W = LL'``; then ``P^-1 = L B^-1 L'`` and ``log|P| + log|W| = log|B|``.
This stays finite for weights as small as ``1e-300``.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import DimensionError, NotPositiveDefiniteError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
SVD_DROP = 1e-10
JITTER = 1e-10

__all__ = [
    "SuffStats",
    "ModelState",
    "Transform",
    "precompute",
    "shift_mean",
    "lml",
    "lml_grads",
    "lml_dense_w",
    "lml_with_mean",
    "orthogonalize",
    "lml_fast",
    "predict",
    "predict_from_phi",
]


@dataclass(frozen=True)
class SuffStats:
    """``y'y``, ``r = Phi'y`` and ``A = Phi'Phi``.

    Orthogonalized statistics leave ``A`` as ``None``: it is the identity and
    is only materialized (``gram``) by the ``O(p^3)`` routines.
    """

    yty: float
    r: np.ndarray
    A: Optional[np.ndarray]
    orthogonal: bool = False
    effective_p: Optional[int] = None

    def __post_init__(self):
        if self.A is None and not self.orthogonal:
            raise ValueError("A may only be omitted for orthogonalized statistics")

    @property
    def p(self):
        return self.r.size

    @property
    def gram(self):
        return np.eye(self.p) if self.A is None else self.A


@dataclass(frozen=True)
class ModelState:
    """Hyperparameters of the re-weighted kernel.

    ``w`` are the eigenfunction weights (diagonal of W) and ``sigma2`` the
    noise variance. ``W_dense`` replaces ``diag(w)`` when given and ``mu`` is
    a prior mean on the basis weights.
    """

    w: Optional[np.ndarray]
    sigma2: float
    mu: Optional[np.ndarray] = None
    W_dense: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ValueError(f"sigma2 must be finite and > 0, got {self.sigma2}")
        if self.W_dense is not None:
            W = np.asarray(self.W_dense, dtype=float)
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise DimensionError(f"W_dense must be square, got {W.shape}")
            if not np.allclose(W, W.T, rtol=1e-12, atol=0):
                raise NotPositiveDefiniteError("W_dense is not symmetric")
            object.__setattr__(self, "W_dense", W)
            if self.w is None:
                object.__setattr__(self, "w", np.diag(W).copy())
        if self.w is None:
            raise ValueError("either w or W_dense is required")
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if self.W_dense is None and not np.all(w > 0):
            raise ValueError("weights must be strictly positive")
        object.__setattr__(self, "w", w)
        if self.mu is not None:
            object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(-1))


@dataclass(frozen=True)
class Transform:
    """Right singular vectors ``V`` (p x p~) and singular values of ``Phi``."""

    V: np.ndarray
    Sigma: np.ndarray

    @property
    def effective_p(self):
        return self.Sigma.size

    def apply(self, phi):
        """Map raw eigenfunction values to the orthogonalized basis."""
        return (phi @ self.V) / self.Sigma


def precompute(phi, y) -> SuffStats:
    phi = np.asarray(phi, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if phi.ndim != 2 or phi.shape[0] != y.size:
        raise DimensionError(f"Phi shape {phi.shape} does not match y of length {y.size}")
    n, p = phi.shape
    return SuffStats(float(y @ y), phi.T @ y, phi.T @ phi, False, min(n, p))


def shift_mean(stats: SuffStats, mu) -> SuffStats:
    """Statistics of ``y - Phi mu``: the substitution for a nonzero weight mean."""
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if mu.size != stats.p:
        raise DimensionError(f"mu has length {mu.size}, expected p={stats.p}")
    Amu = stats.gram @ mu
    yty = stats.yty - 2.0 * stats.r @ mu + mu @ Amu
    return SuffStats(float(yty), stats.r - Amu, stats.A, stats.orthogonal, stats.effective_p)


class PFactor:
    """Cholesky factor of ``B = sigma^2 I + L'AL`` for ``W = LL'``."""

    def __init__(self, A, state: ModelState):
        p = A.shape[0]
        s2 = state.sigma2
        if state.W_dense is not None:
            W = state.W_dense
            if W.shape != (p, p):
                raise DimensionError(f"W_dense has shape {W.shape}, expected ({p}, {p})")
            try:
                L = np.linalg.cholesky(W)
            except np.linalg.LinAlgError:
                raise NotPositiveDefiniteError("W_dense is not positive definite")
            self.dense = True
            self.L = L
            LtAL = L.T @ A @ L
        else:
            if state.w.size != p:
                raise DimensionError(f"w has length {state.w.size}, expected p={p}")
            self.dense = False
            self.L = np.sqrt(state.w)
            LtAL = self.L[:, None] * A * self.L[None, :]
        B = LtAL + s2 * np.eye(p)
        B = 0.5 * (B + B.T)
        try:
            self.C = np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            jitter = JITTER * np.trace(B) / p
            logger.warning("P not numerically SPD; adding jitter %.3e", jitter)
            try:
                self.C = np.linalg.cholesky(B + jitter * np.eye(p))
            except np.linalg.LinAlgError:
                raise NotPositiveDefiniteError(
                    "P = sigma^2 W^-1 + A is not positive definite even with jitter; "
                    "try a larger noise variance or smaller weights"
                )
        self.logdet_B = 2.0 * float(np.sum(np.log(np.diag(self.C))))

    def _lt(self, M):
        return self.L.T @ M if self.dense else (self.L * M.T).T

    def _l(self, M):
        return self.L @ M if self.dense else (self.L * M.T).T

    def half_solve(self, M):
        """``C^-1 L' M`` so that ``M' P^-1 M = ||half_solve(M)||^2``."""
        return scipy.linalg.solve_triangular(self.C, self._lt(M), lower=True)

    def solve(self, M):
        """``P^-1 M``."""
        z = scipy.linalg.cho_solve((self.C, True), self._lt(M))
        return self._l(z)


def _check(stats: SuffStats, n):
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if stats.A is not None and stats.A.shape != (stats.p, stats.p):
        raise DimensionError(f"A has shape {stats.A.shape}, expected ({stats.p}, {stats.p})")


def _effective(stats: SuffStats, state: ModelState):
    return stats if state.mu is None else shift_mean(stats, state.mu)


def lml(stats: SuffStats, state: ModelState, n: int) -> float:
    """Log marginal likelihood via the inversion and determinant lemmas.

    Honours ``state.W_dense`` and ``state.mu`` when present. Cost ``O(p^3)``.
    """
    _check(stats, n)
    stats = _effective(stats, state)
    s2 = state.sigma2
    f = PFactor(stats.gram, state)
    quad = stats.yty - stats.r @ f.solve(stats.r)
    # log|Phi W Phi' + s2 I| = log|P| + log|W| + (n - p) log s2 = log|B| + (n - p) log s2
    logdet = f.logdet_B + (n - stats.p) * math.log(s2)
    return -0.5 * (logdet + quad / s2 + n * LOG_2PI)


def lml_dense_w(stats: SuffStats, W_dense, sigma2: float, n: int, mu=None) -> float:
    return lml(stats, ModelState(None, sigma2, mu=mu, W_dense=W_dense), n)


def lml_with_mean(stats: SuffStats, state: ModelState, n: int) -> float:
    if state.mu is None:
        raise ValueError("state has no prior mean mu")
    return lml(stats, state, n)


def lml_grads(stats: SuffStats, state: ModelState, n: int):
    """Analytic derivatives of :func:`lml` with respect to ``w`` and ``sigma2``.

    Returns
    -------
    dw : ndarray, shape (p,)
    dsigma2 : float
    """
    _check(stats, n)
    if state.W_dense is not None:
        raise ValueError("analytic gradients are implemented for diagonal W only")
    stats = _effective(stats, state)
    s2 = state.sigma2
    A, r = stats.gram, stats.r
    f = PFactor(A, state)
    Pr = f.solve(r)
    PA = f.solve(A)
    fit = r - A @ Pr
    dw = fit**2 / (2.0 * s2**2) - (np.diag(A) - np.sum(A * PA, axis=0)) / (2.0 * s2)
    num = stats.yty - 2.0 * r @ Pr + Pr @ A @ Pr
    ds2 = num / (2.0 * s2**2) - (n - np.trace(PA)) / (2.0 * s2)
    return dw, float(ds2)


def orthogonalize(phi, y):
    """SVD-orthogonalize the basis on the training inputs.

    Singular values below ``1e-10 * max`` are dropped, defining ``p~``. The
    returned statistics have ``A = I`` (left implicit) and ``r`` in the new basis.
    """
    phi = np.asarray(phi, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if phi.shape[0] != y.size:
        raise DimensionError(f"Phi shape {phi.shape} does not match y of length {y.size}")
    U, s, Vt = np.linalg.svd(phi, full_matrices=False)
    if s.size == 0 or not s[0] > 0:
        raise NotPositiveDefiniteError("Phi has rank 0; nothing to orthogonalize")
    keep = s > SVD_DROP * s[0]
    U, s, V = U[:, keep], s[keep], Vt[keep].T
    pt = int(s.size)
    logger.debug("orthogonalize: p=%d -> p~=%d", phi.shape[1], pt)
    stats = SuffStats(float(y @ y), U.T @ y, None, True, pt)
    return Transform(V, s), stats


def lml_fast(stats: SuffStats, state: ModelState, n: int):
    """LML and all derivatives in ``O(p~)`` for orthogonalized statistics.

    With ``A = I`` the matrix ``P`` is diagonal, ``1/P_i = w_i / (s2 + w_i)``.

    Returns
    -------
    value : float
    dw : ndarray, shape (p~,)
    dsigma2 : float
    """
    if not stats.orthogonal:
        raise ValueError("lml_fast requires orthogonalized statistics")
    w = state.w
    s2 = state.sigma2
    r = stats.r
    if w.size != r.size:
        raise DimensionError(f"w has length {w.size}, expected p~={r.size}")
    rr = r * r
    t = s2 + w
    resid = stats.yty - rr.sum()  # energy of y outside span(Phi)
    logdet = np.log(t).sum() + (n - r.size) * math.log(s2)
    quad = resid / s2 + (rr / t).sum()
    value = -0.5 * (logdet + quad + n * LOG_2PI)
    dw = rr / (2.0 * t * t) - 1.0 / (2.0 * t)
    ds2 = 0.5 * (resid / (s2 * s2) + (rr / (t * t)).sum()) - 0.5 * (
        (n - r.size) / s2 + (1.0 / t).sum()
    )
    return float(value), dw, float(ds2)


def predict_from_phi(phi_star, stats: SuffStats, state: ModelState):
    """Posterior mean and pointwise predictive variance (noise included).

    ``mean = phi* (mu + P^-1 (r - A mu))`` and
    ``var = sigma^2 (1 + phi*' P^-1 phi*)``.
    """
    phi_star = np.atleast_2d(np.asarray(phi_star, dtype=float))
    if phi_star.shape[1] != stats.p:
        raise DimensionError(f"basis has {phi_star.shape[1]} columns, expected {stats.p}")
    eff = _effective(stats, state)
    if stats.orthogonal and state.W_dense is None:
        # P^-1 = diag(w / (sigma2 + w)): O(n* p~)
        shrink = state.w / (state.sigma2 + state.w)
        coef = shrink * eff.r
        quad = (phi_star * phi_star) @ shrink
    else:
        f = PFactor(stats.gram, state)
        coef = f.solve(eff.r)
        H = f.half_solve(phi_star.T)
        quad = np.sum(H * H, axis=0)
    if state.mu is not None:
        coef = coef + state.mu
    return phi_star @ coef, state.sigma2 * (1.0 + quad)


def predict(basis, stats: SuffStats, state: ModelState, Xstar, transform: Transform = None):
    """Predict at ``Xstar`` using a :class:`~gpgrief.basis.GriefBasis`.

    Pass the :class:`Transform` when ``stats`` came from :func:`orthogonalize`.
    """
    from .basis import phi_at

    phi_star = phi_at(basis, Xstar)
    if transform is not None:
        phi_star = transform.apply(phi_star)
    elif stats.orthogonal:
        raise ValueError("orthogonalized statistics need their Transform to predict")
    return predict_from_phi(phi_star, stats, state)
