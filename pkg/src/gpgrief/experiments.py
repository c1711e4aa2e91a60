"""Desk-scale studies: covariance reconstruction, preconditioning and the
two-dimensional demo. Shared by the command-line driver and the acceptance
tests."""

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .basis import build_basis, build_grid, phi_at
from .inference import grief_builder, init_hypers, optimize_type2
from .kernels import ProductKernel
from .model import ModelState, precompute, predict, predict_from_phi
from .preconditioner import WoodburyApplier, pcg_solve

logger = logging.getLogger(__name__)

__all__ = [
    "reconstruction_study",
    "randomized_nystrom_factor",
    "relative_frobenius",
    "eig_lower_bound",
    "precondition_study",
    "demo_2d",
    "DemoResult",
    "exact_gp_predict",
    "sinsin_data",
    "reconstruction_grief_only",
]


def relative_frobenius(K, F):
    """``||K - F F'||_F / ||K||_F``."""
    return float(np.linalg.norm(K - F @ F.T) / np.linalg.norm(K))


def eig_lower_bound(K, ps):
    """Best rank-p relative Frobenius error of a symmetric PSD ``K`` for each p."""
    ev = np.clip(np.linalg.eigvalsh(K)[::-1], 0.0, None)
    tail = np.sqrt(np.cumsum((ev**2)[::-1])[::-1])
    total = np.sqrt(np.sum(ev**2))
    return [float(tail[p] / total) if p < ev.size else 0.0 for p in ps]


def randomized_nystrom_factor(K_cols, K_ZZ):
    """Factor ``F`` with ``F F' = K_AZ K_ZZ^+ K_ZA`` (pseudo-inverse at 1e-12)."""
    lam, V = np.linalg.eigh(K_ZZ)
    keep = lam > 1e-12 * lam.max()
    return K_cols @ V[:, keep] / np.sqrt(lam[keep])


def reconstruction_study(n_train=1000, n_test=1000, d=10, mbar=20, ps=(8, 32, 128, 512),
                         lengthscale=None, seed=0, n_nystrom=10):
    """Covariance reconstruction error versus the number of basis functions.

    Inputs are drawn from ``U(-sqrt 3, sqrt 3)^d`` and the SE kernel has unit
    variance and lengthscale ``sqrt(d)`` unless given. Returns rows of
    ``{p, method, block, error}`` where ``block`` is ``train`` or ``joint``
    and ``method`` is ``grief``, ``random_nystrom`` (mean over ``n_nystrom``
    nested subsets of ``p`` training points) or ``optimal`` (truncated
    eigendecomposition).
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), (n_train + n_test, d))
    Xtr = X[:n_train]
    ls = math.sqrt(d) if lengthscale is None else float(lengthscale)
    kernel = ProductKernel.from_hypers(np.full(d, ls), 1.0)
    K = kernel.gram(X)
    Ktr = K[:n_train, :n_train]
    lb_train = eig_lower_bound(Ktr, ps)
    lb_joint = eig_lower_bound(K, ps)
    grid = build_grid(Xtr, mbar)
    # one permutation per Nystrom seed; prefixes give nested subsets across p
    perms = [np.random.default_rng([seed, s]).permutation(n_train) for s in range(n_nystrom)]
    rows = []
    for j, p in enumerate(ps):
        t0 = time.perf_counter()
        basis = build_basis(Xtr, kernel, mbar, p, grid=grid)
        Ph = phi_at(basis, X)
        errs = {"train": [], "joint": []}
        for perm in perms:
            sub = perm[: min(p, n_train)]
            F = randomized_nystrom_factor(K[:, sub], K[np.ix_(sub, sub)])
            errs["train"].append(relative_frobenius(Ktr, F[:n_train]))
            errs["joint"].append(relative_frobenius(K, F))
        rows += [
            dict(p=p, method="grief", block="train", error=relative_frobenius(Ktr, Ph[:n_train])),
            dict(p=p, method="grief", block="joint", error=relative_frobenius(K, Ph)),
            dict(p=p, method="random_nystrom", block="train", error=float(np.mean(errs["train"]))),
            dict(p=p, method="random_nystrom", block="joint", error=float(np.mean(errs["joint"]))),
            dict(p=p, method="optimal", block="train", error=lb_train[j]),
            dict(p=p, method="optimal", block="joint", error=lb_joint[j]),
        ]
        logger.info("reconstruction p=%d done in %.2fs", p, time.perf_counter() - t0)
    return rows


def reconstruction_grief_only(n_train=2500, d=100, mbar=100, ps=(8, 32, 128), lengthscale=None,
                              seed=0):
    """High-dimensional structural run reporting GRIEF errors only.

    With the defaults ``m = 100**100``; nothing here is ever sized by ``m``.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), (n_train, d))
    ls = math.sqrt(d) if lengthscale is None else float(lengthscale)
    kernel = ProductKernel.from_hypers(np.full(d, ls), 1.0)
    K = kernel.gram(X)
    grid = build_grid(X, mbar)
    rows = []
    for p in ps:
        basis = build_basis(X, kernel, mbar, p, grid=grid)
        rows.append(dict(p=p, method="grief", block="train",
                         error=relative_frobenius(K, basis.phi), log10_m=grid.log10_m))
    return rows


def precondition_study(n=1000, d=5, p=200, mbar=10, tol=1e-8, seeds=(0, 1, 2, 3, 4),
                       lengthscale=None, sigma2=1e-2, max_iters=5000):
    """Plain versus GRIEF-preconditioned CG on ``(K + sigma2 I) x = b``.

    Returns one dict per seed with iteration counts and residual histories.
    """
    out = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        X = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), (n, d))
        ls = math.sqrt(d) if lengthscale is None else float(lengthscale)
        kernel = ProductKernel.from_hypers(np.full(d, ls), 1.0)
        K = kernel.gram(X)
        b = rng.standard_normal(n)
        plain = pcg_solve(K, sigma2, None, b, tol, max_iters)
        basis = build_basis(X, kernel, mbar, p)
        applier = WoodburyApplier(basis.phi, 1.0, sigma2)
        pre = pcg_solve(K, sigma2, applier, b, tol, max_iters)
        out.append(dict(seed=seed, plain_iters=plain.iterations, plain_converged=plain.converged,
                        grief_iters=pre.iterations, grief_converged=pre.converged,
                        plain_residuals=plain.residuals, grief_residuals=pre.residuals))
    return out


@dataclass
class DemoResult:
    rmse_grief: float
    rmse_exact: float
    grief_kernel: ProductKernel
    grief_sigma2: float
    exact_kernel: ProductKernel
    exact_sigma2: float
    log10_m: float


def sinsin_data(n=10, noise_var=0.1, seed=0, n_test_side=30, low=-math.pi / 2, high=math.pi / 2):
    """``f(x) = sin(x1) sin(x2)`` with Gaussian noise of variance ``noise_var``;
    test targets are noise-free values on a regular grid."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(low, high, (n, 2))
    y = np.sin(X[:, 0]) * np.sin(X[:, 1]) + rng.normal(0.0, math.sqrt(noise_var), n)
    g = np.linspace(low, high, n_test_side)
    G1, G2 = np.meshgrid(g, g, indexing="ij")
    Xt = np.column_stack([G1.ravel(), G2.ravel()])
    yt = np.sin(Xt[:, 0]) * np.sin(Xt[:, 1])
    return X, y, Xt, yt


def exact_gp_predict(X, y, Xstar, kernel, sigma2):
    """Dense exact-GP posterior mean and predictive variance (noise included)."""
    K = kernel.gram(X) + sigma2 * np.eye(len(y))
    Ks = kernel.gram(Xstar, X)
    L = np.linalg.cholesky(K)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    V = np.linalg.solve(L, Ks.T)
    var = kernel.variance - np.sum(V * V, axis=0) + sigma2
    return Ks @ alpha, var


def demo_2d(seed=0, n=10, mbar=5, p=4, noise_var=0.1, ard=False):
    """Fit GRIEF-II (``mbar**2`` grid points, ``p`` eigenfunctions) and an
    exact GP to the same data and compare test RMSE.

    Both models share one lengthscale across the two inputs by default; with
    ten points, per-dimension lengthscales mostly fit noise.
    """
    X, y, Xt, yt = sinsin_data(n, noise_var, seed)
    kernel0, s20 = init_hypers(X, y, seed=seed, ard=ard)
    mean_e, _ = exact_gp_predict(X, y, Xt, kernel0, s20)
    grid = build_grid(X, mbar)
    kernel, s2, _ = optimize_type2(grief_builder(X, grid, p), X, y, (kernel0, s20), seed=seed,
                                ard=ard)
    basis = build_basis(X, kernel, mbar, p, grid=grid)
    stats = precompute(basis.phi, y)
    mean_g, _ = predict(basis, stats, ModelState(np.ones(p), s2), Xt)
    rmse = lambda m: float(np.sqrt(np.mean((m - yt) ** 2)))
    return DemoResult(rmse(mean_g), rmse(mean_e), kernel, s2, kernel0, s20, grid.log10_m)
