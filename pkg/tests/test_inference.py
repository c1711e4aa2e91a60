import math

import numpy as np
import pytest

import gpgrief.inference as inf
from gpgrief.basis import build_grid
from gpgrief.inference import (
    ChainConfig,
    Prior,
    SampleSet,
    default_priors,
    exact_gp_lml,
    grief_builder,
    init_hypers,
    mala_chain,
    mala_sample,
    optimize_type2,
    predict_type1,
)
from gpgrief.errors import NumericalError
from gpgrief.kernels import ProductKernel
from gpgrief.model import ModelState, orthogonalize, precompute, predict_from_phi

from oracles import gaussian_logpdf


# priors -----------------------------------------------------------------------

@pytest.mark.parametrize("mode,var", [(1.0, 100.0), (0.1, 0.04), (2.5, 1e-4), (1e-3, 5.0)])
def test_prior_round_trip(mode, var):
    pr = Prior(mode, var)
    assert pr.implied_mode() == pytest.approx(mode, rel=1e-10)
    assert pr.implied_variance() == pytest.approx(var, rel=1e-10)


def test_prior_density_in_log_space():
    pr = Prior(1.0, 100.0)
    v = np.linspace(-3, 5, 7)
    expected = -0.5 * (v - pr.mu_ln) ** 2 / pr.var_ln - 0.5 * math.log(2 * math.pi * pr.var_ln)
    np.testing.assert_allclose(pr.logpdf_log(v), expected, rtol=1e-14)
    h = 1e-6
    fd = (pr.logpdf_log(v + h) - pr.logpdf_log(v - h)) / (2 * h)
    np.testing.assert_allclose(pr.grad_log(v), fd, rtol=1e-6)


@pytest.mark.parametrize("kw", [dict(mode=0.0, variance=1.0), dict(mode=1.0, variance=-1.0),
                                dict(mode=1.0, variance=1.0, kind="gamma")])
def test_prior_rejects(kw):
    with pytest.raises(ValueError):
        Prior(**kw)


def test_default_priors():
    w, s = default_priors(0.3)
    assert (w.mode, w.variance, s.mode, s.variance) == (1.0, 100.0, 0.3, 0.04)


# chain config -----------------------------------------------------------------

def test_chain_defaults_keep_180():
    assert ChainConfig().n_retained == 180


@pytest.mark.parametrize("kw", [dict(total_iters=0), dict(burn_in=10000), dict(thin=0),
                                dict(step_size=0.0), dict(adapt_target=1.0)])
def test_chain_config_rejects(kw):
    with pytest.raises(ValueError):
        ChainConfig(**kw)


# MALA -------------------------------------------------------------------------

def std_normal(x):
    return -0.5 * float(x @ x), -x


def test_mala_standard_normal_moments():
    cfg = ChainConfig(total_iters=41000, burn_in=1000, thin=1, step_size=1.0)
    kept, acc, trace, eps = mala_chain(std_normal, np.zeros(1), cfg, np.random.default_rng(0))
    assert kept.shape == (40000, 1)
    assert abs(kept.mean()) < 0.05
    assert kept.var() == pytest.approx(1.0, rel=0.05)
    assert 0.3 < acc < 0.9
    assert trace.shape == (41000,)


def test_zero_gradient_reduces_to_random_walk():
    # random-walk Metropolis on N(0,1) accepts at rate (2/pi) atan(2/eps)
    eps = 1.0
    cfg = ChainConfig(total_iters=60000, burn_in=0, thin=1, step_size=eps)
    _, acc, _, final = mala_chain(lambda x: (-0.5 * float(x @ x), np.zeros_like(x)),
                                  np.zeros(1), cfg, np.random.default_rng(1))
    assert final == eps  # no adaptation without burn-in
    assert acc == pytest.approx(2 / math.pi * math.atan(2 / eps), abs=0.01)


def test_mala_step_halves_on_nonfinite():
    def boxed(x):
        if abs(x[0]) > 1.0:
            return -math.inf, None
        return 0.0, np.zeros(1)

    cfg = ChainConfig(total_iters=200, burn_in=100, thin=10, step_size=50.0)
    kept, _, _, eps = mala_chain(boxed, np.zeros(1), cfg, np.random.default_rng(2))
    assert eps < 50.0
    assert np.all(np.abs(kept) <= 1.0)


def test_mala_bad_start():
    with pytest.raises(NumericalError):
        mala_chain(lambda x: (-math.inf, x), np.zeros(1), ChainConfig(), np.random.default_rng(0))


def small_orthogonal_problem(seed=0, n=40, p=6):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(n, p))
    y = phi @ rng.normal(size=p) + 0.3 * rng.normal(size=n)
    T, stats = orthogonalize(phi, y)
    return phi, y, (stats, T)


def test_mala_sample_positive_and_reproducible():
    _, y, (stats, _) = small_orthogonal_problem()
    cfg = ChainConfig(total_iters=3000, burn_in=500, thin=25)
    a = mala_sample(stats, y.size, default_priors(0.1), cfg, seed=3)
    b = mala_sample(stats, y.size, default_priors(0.1), cfg, seed=3)
    assert len(a) == cfg.n_retained == 100
    assert np.all(a.w > 0) and np.all(a.sigma2 > 0)
    assert np.array_equal(a.w, b.w) and np.array_equal(a.sigma2, b.sigma2)
    c = mala_sample(stats, y.size, default_priors(0.1), cfg, seed=4)
    assert not np.array_equal(a.w, c.w)


def test_mala_sample_default_keeps_180():
    _, y, (stats, _) = small_orthogonal_problem(p=2)
    s = mala_sample(stats, y.size, default_priors(0.1),
                    log_likelihood=lambda w, s2: (0.0, np.zeros_like(w), 0.0))
    assert len(s) == 180
    assert s.w.shape == (180, 2)


def test_mala_sample_dense_and_fast_paths_agree():
    # same chain, same seed: the O(p) and O(p^3) likelihoods are the same function
    phi, y, (stats, _) = small_orthogonal_problem(seed=5, p=4)
    from gpgrief.model import SuffStats

    dense = SuffStats(stats.yty, stats.r, np.eye(stats.p))
    cfg = ChainConfig(total_iters=400, burn_in=100, thin=10)
    a = mala_sample(stats, y.size, default_priors(0.1), cfg, seed=0)
    b = mala_sample(dense, y.size, default_priors(0.1), cfg, seed=0)
    np.testing.assert_allclose(a.w, b.w, rtol=1e-8)
    np.testing.assert_allclose(a.sigma2, b.sigma2, rtol=1e-8)


# type-I prediction ------------------------------------------------------------

def one_draw_set(w, s2):
    return SampleSet(np.atleast_2d(w), np.atleast_1d(s2), 1.0, np.zeros(1))


def test_predict_type1_single_draw_equals_plain():
    phi, y, (stats, T) = small_orthogonal_problem(seed=6)
    rng = np.random.default_rng(0)
    phs = T.apply(rng.normal(size=(5, phi.shape[1])))
    w = rng.uniform(0.5, 2.0, stats.p)
    m, v = predict_type1(phs, stats, one_draw_set(w, 0.2), None)
    m0, v0 = predict_from_phi(phs, stats, ModelState(w, 0.2))
    np.testing.assert_array_equal(m, m0)
    np.testing.assert_allclose(v, v0, rtol=1e-13)


def test_predict_type1_mixture_by_hand():
    phi, y, (stats, T) = small_orthogonal_problem(seed=7)
    rng = np.random.default_rng(1)
    phs = T.apply(rng.normal(size=(4, phi.shape[1])))
    w1, w2 = rng.uniform(0.5, 2, stats.p), rng.uniform(0.5, 2, stats.p)
    m1, v1 = predict_from_phi(phs, stats, ModelState(w1, 0.1))
    m2, v2 = predict_from_phi(phs, stats, ModelState(w2, 0.4))
    both = SampleSet(np.vstack([w1, w2]), np.array([0.1, 0.4]), 1.0, np.zeros(1))
    m, v = predict_type1(phs, stats, both, None)
    np.testing.assert_allclose(m, (m1 + m2) / 2, rtol=1e-13)
    np.testing.assert_allclose(v, (v1 + v2) / 2 + (m1 - m2) ** 2 / 4, rtol=1e-10)
    # identical draws collapse to the single-draw prediction
    same = SampleSet(np.vstack([w1, w1]), np.array([0.1, 0.1]), 1.0, np.zeros(1))
    ms, vs = predict_type1(phs, stats, same, None)
    np.testing.assert_allclose(ms, m1, rtol=1e-13)
    np.testing.assert_allclose(vs, v1, rtol=1e-10)


def test_predict_type1_empty():
    _, _, (stats, _) = small_orthogonal_problem()
    empty = SampleSet(np.empty((0, stats.p)), np.empty(0), 0.0, np.zeros(0))
    with pytest.raises(ValueError):
        predict_type1(np.zeros((2, stats.p)), stats, empty, None)


# exact GP and initialization --------------------------------------------------

def test_exact_gp_lml_matches_dense():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(15, 2))
    y = rng.normal(size=15)
    kern = ProductKernel.from_hypers([0.7, 1.3], 1.5)
    val = exact_gp_lml(X, y, [0.7, 1.3], 1.5, 0.2)
    assert val == pytest.approx(gaussian_logpdf(y, 0.0, kern.gram(X) + 0.2 * np.eye(15)), rel=1e-12)


def test_exact_gp_lml_gradient():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(12, 3))
    y = rng.normal(size=12)
    theta = np.log([0.8, 1.1, 2.0, 1.3, 0.3])

    def f(t):
        e = np.exp(t)
        return exact_gp_lml(X, y, e[:3], e[3], e[4])

    e = np.exp(theta)
    _, g = exact_gp_lml(X, y, e[:3], e[3], e[4], with_grad=True)
    h = 1e-6
    fd = np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(5)])
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_init_zero_targets_hits_floor():
    X = np.random.default_rng(10).uniform(0, 5, (30, 1))
    _, s2 = init_hypers(X, np.zeros(30))
    assert 1e-12 <= s2 <= 1e-6


def test_init_recovers_lengthscale_order():
    rng = np.random.default_rng(11)
    ell = 0.5
    X = np.sort(rng.uniform(0, 6, 150))[:, None]
    K = ProductKernel.from_hypers([ell], 1.0).gram(X) + 1e-8 * np.eye(150)
    y = np.linalg.cholesky(K) @ rng.normal(size=150)
    kern, s2 = init_hypers(X, y)
    assert ell / 3 <= kern.lengthscales[0] <= 3 * ell
    assert s2 < 1e-2


@pytest.mark.parametrize("omega", [0.5, 2.0, 4.0])
def test_init_noiseless_sine(omega):
    # feature length of sin(omega x) is its quarter period, zero to crest
    quarter = math.pi / (2 * omega)
    X = np.linspace(0, 10 * math.pi / omega, 200)[:, None]
    kern, _ = init_hypers(X, np.sin(omega * X[:, 0]))
    assert quarter / 3 <= kern.lengthscales[0] <= 3 * quarter


def test_init_subsamples_to_cap(monkeypatch):
    seen = []
    real = inf.exact_gp_lml

    def spy(X, y, *a, **k):
        seen.append(len(y))
        return real(X, y, *a, **k)

    monkeypatch.setattr(inf, "exact_gp_lml", spy)
    rng = np.random.default_rng(12)
    X = rng.normal(size=(130, 2))
    init_hypers(X, rng.normal(size=130), max_points=50, n_starts=1)
    assert seen and set(seen) == {50}


def test_init_isotropic_shares_lengthscale():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(40, 3))
    kern, _ = init_hypers(X, np.sin(X.sum(axis=1)), ard=False)
    assert np.ptp(kern.lengthscales) == 0


def test_init_needs_two_points():
    with pytest.raises(ValueError):
        init_hypers(np.zeros((1, 1)), np.zeros(1))


# type II ----------------------------------------------------------------------

def type2_problem(seed=14):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.5, 1.5, (40, 2))
    y = np.sin(2 * X[:, 0]) * np.cos(X[:, 1]) + 0.1 * rng.normal(size=40)
    grid = build_grid(X, 6)
    return X, y, grid_builder(X, grid)


def grid_builder(X, grid):
    return grief_builder(X, grid, 12)


def test_type2_trace_non_decreasing():
    X, y, builder = type2_problem()
    init = init_hypers(X, y)
    kern, s2, rep = optimize_type2(builder, X, y, init, n_restarts=2, max_iter=30)
    assert np.all(np.diff(rep.lml_trace) >= 0)
    assert s2 > 0 and np.all(kern.lengthscales > 0)
    st = precompute(builder(kern), y)
    from gpgrief.model import lml

    assert lml(st, ModelState(np.ones(st.p), s2), y.size) == pytest.approx(rep.best_lml, rel=1e-9)
    assert len(rep.iterations) == 2


def test_type2_start_at_optimum_stops_quickly():
    X, y, builder = type2_problem()
    kern, s2, _ = optimize_type2(builder, X, y, init_hypers(X, y), n_restarts=3, max_iter=200)
    _, _, rep = optimize_type2(builder, X, y, (kern, s2), n_restarts=1)
    assert rep.iterations[0] <= 2


def test_type2_budget_flag():
    X, y, builder = type2_problem()
    _, _, rep = optimize_type2(builder, X, y, init_hypers(X, y), n_restarts=1, max_iter=1)
    assert rep.budget_exhausted
