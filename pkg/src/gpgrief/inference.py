"""Hyperparameter inference: exact-GP initialization, type-II maximization of
the GRIEF marginal likelihood, and MALA sampling of ``(w, sigma2)``."""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import NumericalError
from .kernels import KernelFamily, ProductKernel
from .model import (
    ModelState,
    SuffStats,
    lml,
    lml_fast,
    lml_grads,
    precompute,
    predict_from_phi,
)

logger = logging.getLogger(__name__)

ADAPT_TARGET = 0.574
LOG_2PI = math.log(2.0 * math.pi)

__all__ = [
    "Prior",
    "ChainConfig",
    "SampleSet",
    "Type2Report",
    "exact_gp_lml",
    "init_hypers",
    "grief_builder",
    "optimize_type2",
    "mala_chain",
    "mala_sample",
    "default_priors",
    "predict_type1",
]


@dataclass(frozen=True)
class Prior:
    """Log-normal prior specified by its mode and variance (original scale).

    ``mu_ln`` and ``var_ln`` are the parameters of the underlying normal,
    recovered from ``mode = exp(mu - s2)`` and
    ``variance = (exp(s2) - 1) exp(2 mu + s2)``.
    """

    mode: float
    variance: float
    kind: str = "log_normal"
    mu_ln: float = field(init=False)
    var_ln: float = field(init=False)

    def __post_init__(self):
        if self.kind != "log_normal":
            raise ValueError(f"unsupported prior kind {self.kind!r}")
        if not (self.mode > 0 and self.variance > 0):
            raise ValueError("mode and variance must both be positive")
        # with t = exp(s2): (t - 1) t^3 = variance / mode^2, monotone for t > 1
        c = self.variance / self.mode**2
        g = lambda t: (t - 1.0) * t**3 - c
        t = scipy.optimize.brentq(g, 1.0, 2.0 + c**0.25, xtol=1e-300, rtol=4 * np.finfo(float).eps)
        for _ in range(2):
            t -= g(t) / (4.0 * t**3 - 3.0 * t**2)
        var_ln = math.log(t)
        if not var_ln > 0:
            raise ValueError(f"no log-normal with mode {self.mode}, variance {self.variance}")
        object.__setattr__(self, "var_ln", var_ln)
        object.__setattr__(self, "mu_ln", math.log(self.mode) + var_ln)

    def implied_mode(self):
        return math.exp(self.mu_ln - self.var_ln)

    def implied_variance(self):
        return math.expm1(self.var_ln) * math.exp(2.0 * self.mu_ln + self.var_ln)

    def logpdf_log(self, v):
        """Log density of ``v = log(x)`` (the Jacobian is already included)."""
        v = np.asarray(v, dtype=float)
        z = v - self.mu_ln
        return -0.5 * (z * z / self.var_ln + math.log(self.var_ln) + LOG_2PI)

    def grad_log(self, v):
        return -(np.asarray(v, dtype=float) - self.mu_ln) / self.var_ln


def default_priors(sigma2_0):
    """``{mode 1, variance 100}`` on each weight, ``{sigma2_0, 0.04}`` on the noise."""
    return Prior(1.0, 100.0), Prior(float(sigma2_0), 0.04)


@dataclass(frozen=True)
class ChainConfig:
    total_iters: int = 10000
    burn_in: int = 1000
    thin: int = 50
    step_size: float = 0.1
    adapt_target: float = ADAPT_TARGET

    def __post_init__(self):
        problems = []
        if self.total_iters < 1:
            problems.append("total_iters must be >= 1")
        if not 0 <= self.burn_in < self.total_iters:
            problems.append("burn_in must satisfy 0 <= burn_in < total_iters")
        if self.thin < 1:
            problems.append("thin must be >= 1")
        if not self.step_size > 0:
            problems.append("step_size must be > 0")
        if not 0 < self.adapt_target < 1:
            problems.append("adapt_target must lie in (0, 1)")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def n_retained(self):
        return len(range(self.burn_in, self.total_iters, self.thin))


@dataclass
class SampleSet:
    """Retained MALA draws. Row ``k`` of ``w`` pairs with ``sigma2[k]``."""

    w: np.ndarray
    sigma2: np.ndarray
    acceptance_rate: float
    log_posterior_trace: np.ndarray
    step_size: float = float("nan")

    def __len__(self):
        return self.sigma2.size

    @property
    def draws(self):
        return [(self.w[k], float(self.sigma2[k])) for k in range(len(self))]

    def states(self):
        return [ModelState(self.w[k], float(self.sigma2[k])) for k in range(len(self))]


# exact GP ---------------------------------------------------------------------

def _sq_dists(X):
    return [(X[:, i, None] - X[None, :, i]) ** 2 for i in range(X.shape[1])]


def exact_gp_lml(X, y, lengthscales, variance, sigma2, with_grad=False, _D=None):
    """Dense SE-ARD log marginal likelihood; gradient w.r.t. log-parameters
    ``[log l_1..log l_d, log variance, log sigma2]`` when ``with_grad``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.size
    D = _sq_dists(X) if _D is None else _D
    ls = np.asarray(lengthscales, dtype=float)
    E = sum(Di / (li * li) for Di, li in zip(D, ls))
    K = variance * np.exp(-0.5 * E)
    C = K + sigma2 * np.eye(n)
    c, low = scipy.linalg.cho_factor(C, lower=True)
    alpha = scipy.linalg.cho_solve((c, low), y)
    value = -0.5 * (y @ alpha) - np.sum(np.log(np.diag(c))) - 0.5 * n * LOG_2PI
    if not with_grad:
        return float(value)
    Cinv = scipy.linalg.cho_solve((c, low), np.eye(n))
    M = np.outer(alpha, alpha) - Cinv
    grad = np.empty(ls.size + 2)
    for i, (Di, li) in enumerate(zip(D, ls)):
        grad[i] = 0.5 * np.sum(M * K * Di) / (li * li)
    grad[-2] = 0.5 * np.sum(M * K)
    grad[-1] = 0.5 * sigma2 * np.trace(M)
    return float(value), grad


def _median_lengthscales(X):
    out = []
    for i in range(X.shape[1]):
        col = X[:, i]
        diffs = np.abs(col[:, None] - col[None, :])[np.triu_indices(col.size, 1)]
        med = np.median(diffs) if diffs.size else 0.0
        out.append(med if med > 0 else 1.0)
    return np.array(out)


def _bounds(X, y, ard=True):
    span = np.ptp(X, axis=0)
    span = np.where(span > 0, span, 1.0)
    if not ard:
        span = np.array([np.exp(np.mean(np.log(span)))])
    v = float(np.var(y))
    floor = 1e-8 * v + 1e-12
    vs = v if v > 0 else 1.0
    lo = np.concatenate([np.log(1e-3 * span), [math.log(1e-6 * vs + 1e-12), math.log(floor)]])
    hi = np.concatenate([np.log(1e3 * span), [math.log(1e3 * vs), math.log(10.0 * vs)]])
    return lo, hi, floor


def init_hypers(X, y, kernel_family="squared_exponential", seed=0, max_points=1000,
                n_starts=3, ard=True):
    """Initialize ``theta`` and ``sigma2`` from an exact GP on a subsample.

    Uses ``min(n, max_points)`` rows chosen without replacement and maximizes
    the dense log marginal likelihood over log-lengthscales, log-variance and
    log-noise from ``n_starts`` starting points. With ``ard=False`` a single
    lengthscale is shared by all dimensions.

    Returns
    -------
    kernel : ProductKernel
    sigma2 : float
    """
    KernelFamily(kernel_family)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least two points to initialize hyperparameters")
    rng = np.random.default_rng(seed)
    if n > max_points:
        idx = rng.choice(n, size=max_points, replace=False)
        X, y = X[idx], y[idx]
    lo, hi, floor = _bounds(X, y, ard)
    v = float(np.var(y))
    vs = v if v > 0 else 1.0
    ls0 = _median_lengthscales(X)
    if not ard:
        ls0 = np.array([np.exp(np.mean(np.log(ls0)))])
    base = np.concatenate([np.log(ls0), [math.log(vs), math.log(max(0.1 * vs, floor))]])
    D = _sq_dists(X)
    k = ls0.size

    def negative(theta):
        e = np.exp(theta)
        ls = np.broadcast_to(e[:k], (d,))
        try:
            val, g = exact_gp_lml(X, y, ls, e[k], e[k + 1], with_grad=True, _D=D)
        except (np.linalg.LinAlgError, ValueError):
            return 1e300, np.zeros_like(theta)
        if not ard:
            g = np.concatenate([[g[:d].sum()], g[d:]])
        if not np.isfinite(val) or not np.all(np.isfinite(g)):
            return 1e300, np.zeros_like(theta)
        return -val, -g

    best = None
    for s in range(n_starts):
        x0 = base if s == 0 else base + rng.normal(0.0, 1.0, base.size)
        x0 = np.clip(x0, lo, hi)
        res = scipy.optimize.minimize(negative, x0, jac=True, method="L-BFGS-B",
                                      bounds=list(zip(lo, hi)))
        if np.isfinite(res.fun) and res.fun < 1e299 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        warnings.warn("exact-GP initialization failed; using median-heuristic lengthscales",
                      stacklevel=2)
        theta = np.clip(base, lo, hi)
    else:
        theta = best.x
    e = np.exp(theta)
    kernel = ProductKernel.from_hypers(np.broadcast_to(e[:k], (d,)), e[k], kernel_family)
    return kernel, float(max(e[k + 1], floor))


# type II ----------------------------------------------------------------------

def grief_builder(X, grid, p):
    """Return ``kernel -> Phi`` rebuilding the eigenfunctions on a fixed grid."""
    from .basis import build_phi, decompose

    def build(kernel):
        return build_phi(X, grid, kernel, decompose(grid, kernel), p).phi

    return build


@dataclass
class Type2Report:
    best_lml: float
    iterations: list
    converged: list
    lml_trace: np.ndarray
    budget_exhausted: bool
    n_evaluations: int


def optimize_type2(builder: Callable, X, y, init, seed=0, n_restarts=3, max_iter=200,
                   fd_step=1e-5, ard=True):
    """Maximize the GRIEF LML (unit weights) over kernel and noise parameters.

    Parameters
    ----------
    builder : callable
        ``builder(kernel)`` returns ``Phi`` on the training inputs.
    init : tuple
        ``(ProductKernel, sigma2)`` starting point; the first run starts here
        and ``n_restarts - 1`` further runs start log-uniformly inside a
        moderate box (lengthscales in ``[0.05, 1]`` times the input span,
        signal variance in ``[0.1, 10]`` and noise in ``[1e-3, 1]`` times
        ``var(y)``), so a near-interpolating start cannot trap every run.
    ard : bool
        ``False`` ties all lengthscales (the geometric mean of the initial
        ones is used as the start).

    Kernel-parameter gradients are central differences in log space (each
    costs two rebuilds of ``Phi``); the noise derivative is analytic.

    Returns
    -------
    kernel, sigma2, report
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    n, d = X.shape
    kernel0, s20 = init
    family = kernel0.dims[0].family
    lo, hi, _ = _bounds(X, y, ard)
    log_ls = np.log(kernel0.lengthscales)
    if not ard:
        log_ls = np.array([log_ls.mean()])
    k = log_ls.size
    theta0 = np.concatenate([log_ls, [math.log(kernel0.variance), math.log(s20)]])
    theta0 = np.clip(theta0, lo, hi)
    cache = {}
    n_eval = [0]

    def make_kernel(kt):
        e = np.exp(kt)
        return ProductKernel.from_hypers(np.broadcast_to(e[:k], (d,)), e[k], family)

    def stats_for(kt):
        key = kt.tobytes()
        if key not in cache:
            phi = builder(make_kernel(kt))
            cache[key] = precompute(phi, y)
            n_eval[0] += 1
        return cache[key]

    def value(theta):
        st = stats_for(theta[: k + 1])
        return lml(st, ModelState(np.ones(st.p), math.exp(theta[-1])), n)

    def negative(theta):
        try:
            st = stats_for(theta[: k + 1])
            s2 = math.exp(theta[-1])
            state = ModelState(np.ones(st.p), s2)
            f0 = lml(st, state, n)
            g = np.empty_like(theta)
            for j in range(k + 1):
                e = np.zeros_like(theta)
                e[j] = fd_step
                g[j] = (value(theta + e) - value(theta - e)) / (2.0 * fd_step)
            g[-1] = lml_grads(st, state, n)[1] * s2
        except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
            logger.debug("type-II objective failed at %s: %s", theta, exc)
            return 1e300, np.zeros_like(theta)
        if not np.isfinite(f0) or not np.all(np.isfinite(g)):
            return 1e300, np.zeros_like(theta)
        return -f0, -g

    span = np.exp(0.5 * (lo[:k] + hi[:k]))
    vs = float(np.var(y)) or 1.0
    box_lo = np.concatenate([np.log(0.05 * span), [math.log(0.1 * vs), math.log(1e-3 * vs)]])
    box_hi = np.concatenate([np.log(span), [math.log(10.0 * vs), math.log(vs)]])
    rng = np.random.default_rng(seed)
    trace, iterations, converged = [], [], []
    best_theta, best_val = theta0, -np.inf
    exhausted = False
    for run in range(max(1, n_restarts)):
        x0 = theta0 if run == 0 else np.clip(rng.uniform(box_lo, box_hi), lo, hi)

        def record(xk):
            trace.append(-negative(xk)[0])

        record(x0)
        res = scipy.optimize.minimize(negative, x0, jac=True, method="L-BFGS-B",
                                      bounds=list(zip(lo, hi)),
                                      callback=record, options={"maxiter": max_iter})
        iterations.append(int(res.nit))
        converged.append(bool(res.success))
        if res.nit >= max_iter:
            exhausted = True
        if -res.fun > best_val:
            best_val, best_theta = -res.fun, res.x
    kernel = make_kernel(best_theta[: k + 1])
    report = Type2Report(
        best_lml=float(best_val),
        iterations=iterations,
        converged=converged,
        lml_trace=np.maximum.accumulate(np.asarray(trace)),
        budget_exhausted=exhausted,
        n_evaluations=n_eval[0],
    )
    return kernel, float(math.exp(best_theta[-1])), report


# MALA -------------------------------------------------------------------------

def mala_chain(log_target: Callable, x0, config: ChainConfig, rng):
    """Metropolis-adjusted Langevin chain.

    ``log_target(x)`` returns ``(log density, gradient)``. The step size is
    adapted on log scale toward ``config.adapt_target`` during burn-in only.
    Proposals whose density or gradient is not finite are rejected and the
    step size halved.

    Returns
    -------
    kept : ndarray, shape (n_retained, dim)
    acceptance_rate : float
        Over the post burn-in iterations.
    trace : ndarray, shape (total_iters,)
    step_size : float
        Final (frozen) step size.
    """
    x = np.array(x0, dtype=float)
    lp, g = log_target(x)
    if not (np.isfinite(lp) and np.all(np.isfinite(g))):
        raise NumericalError("log target is not finite at the chain's starting point")
    dim = x.size
    log_eps = math.log(config.step_size)
    kept = np.empty((config.n_retained, dim))
    trace = np.empty(config.total_iters)
    n_kept = 0
    n_acc = 0
    for it in range(config.total_iters):
        eps = math.exp(log_eps)
        half = 0.5 * eps * eps
        z = rng.standard_normal(dim)
        u = rng.random()
        mean_fwd = x + half * g
        prop = mean_fwd + eps * z
        lp_p, g_p = log_target(prop)
        if np.isfinite(lp_p) and g_p is not None and np.all(np.isfinite(g_p)):
            back = x - prop - half * g_p
            log_q_back = -np.dot(back, back) / (4.0 * half)
            log_q_fwd = -0.5 * np.dot(z, z)
            log_alpha = lp_p - lp + log_q_back - log_q_fwd
            accept_prob = 1.0 if log_alpha >= 0 else math.exp(log_alpha)
            if u < accept_prob:
                x, lp, g = prop, lp_p, g_p
                if it >= config.burn_in:
                    n_acc += 1
            if it < config.burn_in:
                log_eps += (accept_prob - config.adapt_target) / (it + 1) ** 0.6
        else:
            logger.info("non-finite proposal at iteration %d; halving step size", it)
            log_eps -= math.log(2.0)
        trace[it] = lp
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            kept[n_kept] = x
            n_kept += 1
    n_post = config.total_iters - config.burn_in
    return kept, n_acc / n_post, trace, math.exp(log_eps)


def mala_sample(stats: SuffStats, n: int, priors, config: ChainConfig = None, seed=0,
                log_likelihood: Optional[Callable] = None) -> SampleSet:
    """Sample ``(w, sigma2)`` from the hyperparameter posterior with MALA.

    The chain runs in ``v = (log w, log sigma2)`` with log-normal priors, so
    the prior density in ``v`` is normal and the Jacobian is accounted for.
    It starts at the prior mode. Orthogonalized statistics use the ``O(p)``
    likelihood; otherwise the ``O(p^3)`` one.

    Parameters
    ----------
    priors : (Prior, Prior)
        Prior shared by every weight, and the noise prior.
    log_likelihood : callable, optional
        Replaces the GP likelihood: ``f(w, sigma2) -> (value, dw, dsigma2)``.
    """
    config = config or ChainConfig()
    w_prior, s_prior = priors
    p = stats.p
    if log_likelihood is None:
        if stats.orthogonal:
            def log_likelihood(w, s2):
                return lml_fast(stats, ModelState(w, s2), n)
        else:
            def log_likelihood(w, s2):
                state = ModelState(w, s2)
                dw, ds2 = lml_grads(stats, state, n)
                return lml(stats, state, n), dw, ds2

    def log_target(v):
        with np.errstate(over="ignore", invalid="ignore"):
            w = np.exp(v[:p])
            s2 = math.exp(v[p]) if v[p] < 700 else math.inf
        if not (np.all(np.isfinite(w)) and np.all(w > 0) and 0 < s2 < math.inf):
            return -math.inf, None
        try:
            val, dw, ds2 = log_likelihood(w, s2)
        except (NumericalError, np.linalg.LinAlgError, ValueError):
            return -math.inf, None
        lp = val + w_prior.logpdf_log(v[:p]).sum() + float(s_prior.logpdf_log(v[p]))
        grad = np.empty(p + 1)
        grad[:p] = dw * w + w_prior.grad_log(v[:p])
        grad[p] = ds2 * s2 + float(s_prior.grad_log(v[p]))
        return lp, grad

    v0 = np.concatenate([np.full(p, math.log(w_prior.mode)), [math.log(s_prior.mode)]])
    rng = np.random.default_rng(seed)
    kept, acc, trace, eps = mala_chain(log_target, v0, config, rng)
    return SampleSet(np.exp(kept[:, :p]), np.exp(kept[:, p]), acc, trace, eps)


def predict_type1(basis, stats: SuffStats, samples: SampleSet, Xstar, transform=None):
    """Mixture prediction averaged over posterior draws.

    ``mean`` is the average of per-draw means and ``var`` follows the law of
    total variance. ``basis`` may also be a precomputed ``Phi*`` array, in
    which case ``Xstar`` is ignored.
    """
    if len(samples) == 0:
        raise ValueError("empty SampleSet")
    if isinstance(basis, np.ndarray):
        phi_star = basis
    else:
        from .basis import phi_at

        phi_star = phi_at(basis, Xstar)
        if transform is not None:
            phi_star = transform.apply(phi_star)
    m1 = 0.0
    m2 = 0.0
    for state in samples.states():
        mean, var = predict_from_phi(phi_star, stats, state)
        m1 = m1 + mean
        m2 = m2 + var + mean * mean
    k = len(samples)
    mean = m1 / k
    return mean, m2 / k - mean * mean
