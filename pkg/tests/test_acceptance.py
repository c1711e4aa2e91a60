"""Acceptance criteria 1-10. Each test carries a ``criterion`` marker; the
terminal summary prints one PASS/FAIL line per criterion."""

import math
import time

import numpy as np
import pytest
import scipy.stats

from gpgrief.basis import convergence_probe
from gpgrief.experiments import demo_2d, precondition_study, reconstruction_study
from gpgrief.inference import ChainConfig, Prior, mala_sample
from gpgrief.kernels import ProductKernel
from gpgrief.model import (
    ModelState,
    SuffStats,
    lml,
    lml_dense_w,
    lml_fast,
    lml_grads,
    lml_with_mean,
    orthogonalize,
    precompute,
)
from gpgrief.tensor_algebra import (
    KronMatrix,
    RowKhatriRao,
    Selection,
    kr_q_select,
    kron_matvec,
    top_p_kron_eigs,
)

from oracles import (
    brute_top_p_vec,
    dense_kron,
    dense_lml,
    dense_row_khatri_rao,
    dense_selection,
)


def report(request, text):
    request.node.criterion_detail = text
    print(text)


@pytest.mark.criterion(1, "structured algebra matches dense expansion")
def test_c01_structured_algebra(request):
    rng = np.random.default_rng(101)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(200):
        d = int(rng.integers(1, 5))
        dims = tuple(int(m) for m in rng.integers(1, 6, d))
        n = int(rng.integers(1, 21))
        m = math.prod(dims)
        p = int(rng.integers(1, min(12, m) + 1))
        Q = tuple(rng.normal(size=(k, k)) for k in dims)
        KR = tuple(rng.normal(size=(n, k)) for k in dims)
        flat = rng.choice(m, p, replace=False)
        S = Selection(np.array(np.unravel_index(flat, dims), dtype=np.int64).T, np.zeros(p))
        v = rng.normal(size=m)
        got = kr_q_select(RowKhatriRao(KR), KronMatrix(Q), S)
        ref = dense_row_khatri_rao(KR) @ dense_kron(Q) @ dense_selection(S.index_table, dims).T
        worst = max(worst, np.max(np.abs(got - ref)))
        worst = max(worst, np.max(np.abs(kron_matvec(KronMatrix(Q), v) - dense_kron(Q) @ v)))
    elapsed = time.perf_counter() - t0
    report(request, f"max abs error {worst:.2e}, {elapsed:.2f}s")
    assert worst <= 1e-10
    assert elapsed < 10.0


@pytest.mark.criterion(2, "top-p Kronecker eigenvalues equal brute-force sort")
def test_c02_top_p_exact(request):
    rng = np.random.default_rng(102)
    worst, n_tied = 0.0, 0
    for k in range(100):
        d = int(rng.integers(1, 7))
        dims = [int(m) for m in rng.integers(1, 9, d)]
        if k % 3 == 0:
            # repeated values inside a factor produce bitwise-exact ties
            eigs = [rng.choice([0.5, 1.0, 2.0, 3.0], m) for m in dims]
        else:
            eigs = [rng.uniform(0.01, 5.0, m) for m in dims]
        p = int(rng.integers(1, min(50, math.prod(dims)) + 1))
        S = top_p_kron_eigs(eigs, p)
        vals, idx = brute_top_p_vec(eigs, p)
        worst = max(worst, np.max(np.abs(S.log_values - vals)))
        n_tied += int(np.any(np.diff(vals) == 0))
        np.testing.assert_array_equal(S.index_table, idx)
    report(request, f"max value error {worst:.1e}, {n_tied} instances with ties")
    assert worst <= 1e-12
    assert n_tied > 0


@pytest.mark.criterion(3, "p x p marginal likelihood equals dense Gaussian density")
def test_c03_lml_lemma(request):
    rng = np.random.default_rng(103)
    worst = 0.0
    for k in range(100):
        n = int(rng.integers(1, 201))
        p = int(rng.integers(1, 51))
        phi = rng.normal(size=(n, p))
        y = rng.normal(size=n)
        s2 = rng.uniform(0.05, 2.0)
        stats = precompute(phi, y)
        variant = k % 3
        if variant == 0:
            w = rng.uniform(0.1, 3.0, p)
            got = lml(stats, ModelState(w, s2), n)
            ref = dense_lml(phi, y, np.diag(w), s2)
        elif variant == 1:
            M = rng.normal(size=(p, p))
            W = M @ M.T / p + 0.3 * np.eye(p)
            W = 0.5 * (W + W.T)
            got = lml_dense_w(stats, W, s2, n)
            ref = dense_lml(phi, y, W, s2)
        else:
            w = rng.uniform(0.1, 3.0, p)
            mu = rng.normal(size=p)
            got = lml_with_mean(stats, ModelState(w, s2, mu=mu), n)
            ref = dense_lml(phi, y, np.diag(w), s2, mu)
        worst = max(worst, abs(got - ref) / abs(ref))
    report(request, f"max relative error {worst:.2e}")
    assert worst <= 1e-8


def fd_gradient(stats, w, s2, n):
    x = np.append(w, s2)
    out = np.empty_like(x)
    for j in range(x.size):
        h = 1e-5 * x[j]
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        out[j] = (lml(stats, ModelState(xp[:-1], xp[-1]), n)
                  - lml(stats, ModelState(xm[:-1], xm[-1]), n)) / (2 * h)
    return out


@pytest.mark.criterion(4, "analytic derivatives match finite differences; fast path agrees")
def test_c04_derivatives(request):
    rng = np.random.default_rng(104)
    worst_fd, worst_fast = 0.0, 0.0
    for _ in range(50):
        n = int(rng.integers(5, 120))
        p = int(rng.integers(1, 30))
        phi = rng.normal(size=(n, p))
        y = rng.normal(size=n)
        w = rng.uniform(0.1, 3.0, p)
        s2 = rng.uniform(0.05, 2.0)
        stats = precompute(phi, y)
        dw, ds2 = lml_grads(stats, ModelState(w, s2), n)
        g = np.append(dw, ds2)
        fd = fd_gradient(stats, w, s2, n)
        worst_fd = max(worst_fd, np.max(np.abs(g - fd) / np.abs(fd)))

        _, ost = orthogonalize(phi, y)
        wt = rng.uniform(0.1, 3.0, ost.p)
        state = ModelState(wt, s2)
        val, fdw, fds2 = lml_fast(ost, state, n)
        cw, cs2 = lml_grads(ost, state, n)
        fast = np.append([val], np.append(fdw, fds2))
        cubic = np.append([lml(ost, state, n)], np.append(cw, cs2))
        worst_fast = max(worst_fast, np.max(np.abs(fast - cubic) / np.maximum(np.abs(cubic), 1.0)))
    report(request, f"finite differences {worst_fd:.2e} relative, fast vs cubic {worst_fast:.2e}")
    assert worst_fd <= 1e-5
    assert worst_fast <= 1e-10


@pytest.mark.criterion(5, "1-D eigenfunction convergence probe")
def test_c05_convergence_probe(request):
    t0 = time.perf_counter()
    X = np.random.default_rng(0).uniform(-2.0, 2.0, (30, 1))
    angles = convergence_probe(X, ProductKernel.from_hypers([1.0]), [30, 60, 120, 240])
    elapsed = time.perf_counter() - t0
    steps_ok = all(b <= 1.1 * a for a, b in zip(angles, angles[1:]))
    report(request, "angles " + ", ".join(f"{a:.2e}" for a in angles) + f"; {elapsed:.2f}s")
    assert elapsed < 30.0
    assert angles[-1] < 1e-2
    assert steps_ok, "angle grows across the schedule"


@pytest.mark.criterion(6, "2-D demo RMSE within 0.05 of exact GP")
def test_c06_demo(request):
    res = demo_2d(seed=0)
    gap = abs(res.rmse_grief - res.rmse_exact)
    report(request, f"GRIEF {res.rmse_grief:.4f}, exact GP {res.rmse_exact:.4f}, gap {gap:.4f}")
    assert gap <= 0.05


@pytest.mark.criterion(7, "reconstruction error between random Nystrom and optimum")
def test_c07_reconstruction(request):
    t0 = time.perf_counter()
    rows = reconstruction_study(n_train=1000, n_test=1000, d=10, mbar=20,
                                ps=(8, 32, 128, 512), n_nystrom=10, seed=0)
    elapsed = time.perf_counter() - t0
    table = {(r["p"], r["method"], r["block"]): r["error"] for r in rows}
    bad = []
    for p in (8, 32, 128, 512):
        for block in ("train", "joint"):
            g = table[p, "grief", block]
            if not table[p, "optimal", block] <= g <= table[p, "random_nystrom", block]:
                bad.append((p, block))
    summary = ", ".join(f"p={p}: {table[p, 'grief', 'joint']:.3g}" for p in (8, 32, 128, 512))
    report(request, f"joint GRIEF errors {summary}; {elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < 300.0


@pytest.mark.criterion(8, "preconditioned CG needs fewer iterations")
def test_c08_preconditioning(request):
    res = precondition_study(n=1000, d=5, p=200, tol=1e-8, seeds=(0, 1, 2, 3, 4))
    plain = float(np.median([r["plain_iters"] for r in res]))
    pre = float(np.median([r["grief_iters"] for r in res]))
    report(request, f"median iterations: plain {plain:.0f}, preconditioned {pre:.0f}")
    assert all(r["plain_converged"] and r["grief_converged"] for r in res)
    assert pre < plain


def standard_normal_stub(w_prior, s_prior):
    """Likelihood that cancels both priors so the target in log space is N(0, I)."""

    def f(w, s2):
        v, u = np.log(w), math.log(s2)
        val = (-0.5 * (v @ v) - 0.5 * u * u
               - w_prior.logpdf_log(v).sum() - float(s_prior.logpdf_log(u)))
        dw = (-v - w_prior.grad_log(v)) / w
        ds2 = (-u - float(s_prior.grad_log(u))) / s2
        return val, dw, ds2

    return f


@pytest.mark.criterion(9, "MALA calibration and default retention")
def test_c09_mala(request):
    priors = (Prior(1.0, 100.0), Prior(0.1, 0.04))
    stats = SuffStats(1.0, np.zeros(1), None, True, 1)
    thin = 3
    cfg = ChainConfig(total_iters=1000 + 100_000 * thin, burn_in=1000, thin=thin, step_size=1.0)
    s = mala_sample(stats, 10, priors, cfg, seed=9, log_likelihood=standard_normal_stub(*priors))
    ks = [scipy.stats.kstest(np.log(s.w[:, 0]), "norm").statistic,
          scipy.stats.kstest(np.log(s.sigma2), "norm").statistic]
    default_kept = ChainConfig().n_retained
    report(request, f"{len(s)} draws, KS {ks[0]:.4f} / {ks[1]:.4f}, "
                    f"acceptance {s.acceptance_rate:.2f}; default keeps {default_kept}")
    assert len(s) == 100_000
    assert max(ks) < 0.02
    assert default_kept == 180


def best_times(fns, rounds=9, calls=300):
    """Minimum per-call time of each function, measured round-robin so that
    background load hits every candidate alike."""
    best = [math.inf] * len(fns)
    for _ in range(rounds):
        for i, fn in enumerate(fns):
            t0 = time.perf_counter()
            for _ in range(calls):
                fn()
            best[i] = min(best[i], (time.perf_counter() - t0) / calls)
    return best


@pytest.mark.criterion(10, "O(p) likelihood cost, independent of n")
def test_c10_scaling(request):
    rng = np.random.default_rng(110)
    sizes = [100, 1000, 10_000]
    calls = []
    for pt in sizes:
        stats = SuffStats(float(pt) * 2.0, rng.normal(size=pt), None, True, pt)
        state = ModelState(rng.uniform(0.1, 2.0, pt), 0.3)
        calls.append(lambda stats=stats, state=state, pt=pt: lml_fast(stats, state, 5 * pt))

    # all precomputation happens before any timing starts
    by_n = []
    for n in (1_000, 10_000, 100_000):
        phi = rng.normal(size=(n, 100))
        y = phi @ rng.normal(size=100) + rng.normal(size=n)
        _, stats = orthogonalize(phi, y)
        state = ModelState(rng.uniform(0.1, 2.0, stats.p), 0.3)
        by_n.append(lambda stats=stats, state=state, n=n: lml_fast(stats, state, n))
    del phi, y

    times = best_times(calls)
    slope = np.polyfit(np.log(sizes), np.log(times), 1)[0]
    t_n = best_times(by_n)
    spread = max(abs(t / t_n[0] - 1.0) for t in t_n)
    report(request, f"log-log slope {slope:.2f}; per-call "
                    + ", ".join(f"{t * 1e6:.1f}us" for t in t_n) + " for n=1e3..1e5")
    assert slope < 1.3
    assert spread <= 0.2
