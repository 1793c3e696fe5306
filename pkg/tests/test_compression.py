import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from selfisbi.compression import (
    STENCIL6,
    Compressor,
    SummarySimulator,
    build_compression_artifacts,
    compress,
    fisher_matrix,
    fisher_rao_distance,
    grad_f_omega,
    grad_T,
    latent_fd_steps,
    posterior_summaries,
    rejection_sample,
)
from selfisbi.errors import (
    BudgetExhausted,
    DimensionError,
    IncompatibleDataError,
    InsufficientDataError,
    SingularMatrixError,
    SolverDivergenceError,
)
from selfisbi.lotka_volterra import LotkaVolterraBHM, ObserverConfig, solve_lv
from selfisbi.priors import ParamPrior
from selfisbi.seeding import stream
from selfisbi.selfi import ExpansionArtifacts
from selfisbi.synthetic import LinearGaussianBHM


def exact_expansion(bhm):
    return ExpansionArtifacts(
        theta0=bhm.theta0, f0=bhm.mean_data(bhm.theta0), C0=bhm.Sigma, grad_f0=bhm.A,
        steps=np.ones(bhm.S), N0=0, Ns=0,
    )


def synthetic_chain(seed=0, rel_std=0.5):
    bhm = LinearGaussianBHM.random(S=20, P=20, N=4, seed=seed)
    exp = exact_expansion(bhm)
    comp = build_compression_artifacts(exp, bhm.latent, bhm.omega0)
    compressor = Compressor(comp, exp.f0, exp.C0)
    prior = ParamPrior.from_std(bhm.omega0, rel_std * np.abs(bhm.omega0), positive=False)
    return bhm, exp, comp, compressor, prior


# -- grad_T -----------------------------------------------------------------

def test_stencil_coefficients():
    np.testing.assert_allclose(STENCIL6, [-1 / 60, 3 / 20, -3 / 4, 0, 3 / 4, -3 / 20, 1 / 60])
    k = np.arange(-3, 4)
    # exact on monomials up to degree 6 (derivative at 0 is 1 for k^1, 0 otherwise)
    for p in range(7):
        assert np.sum(STENCIL6 * k**p) == pytest.approx(1.0 if p == 1 else 0.0, abs=1e-14)


@given(st.integers(0, 2**31), st.floats(1e-4, 1.0))
def test_linear_map_is_exact_for_any_step(seed, h):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(7, 3))
    c = rng.normal(size=7)
    J = grad_T(lambda w: B @ w + c, rng.normal(size=3), fd_step=h)
    np.testing.assert_allclose(J, B, atol=1e-9 * max(1.0, 1 / h))


def test_identity_map():
    np.testing.assert_allclose(grad_T(lambda w: w.copy(), np.array([0.3, 2.0, -1.0])), np.eye(3), atol=1e-10)


def test_sixth_order_against_second_order_oracle():
    cfg = ObserverConfig()
    w0 = ParamPrior.benchmark().mean
    T = lambda w: solve_lv(w, cfg.x0, cfg.y0, cfg.dt, cfg.n_steps).values
    h = latent_fd_steps(w0)
    J6 = grad_T(T, w0)
    for j in range(4):
        e = np.zeros(4)
        hh = h[j] / 2
        e[j] = hh
        d2 = (T(w0 + e) - T(w0 - e)) / (2 * hh)
        # third-derivative scale from a coarse third difference
        H = 20 * h[j]
        E = np.zeros(4)
        E[j] = H
        f3 = np.abs(T(w0 + 2 * E) - 2 * T(w0 + E) + 2 * T(w0 - E) - T(w0 - 2 * E)) / (2 * H**3)
        bound = 10 * hh**2 / 6 * (f3 + f3.max() * 1e-3) + 1e-8 * np.abs(T(w0)).max() / hh
        assert np.all(np.abs(J6[:, j] - d2) <= bound)


def test_divergence_names_component_and_offset():
    def T(w):
        if w[1] > 1.0:
            raise SolverDivergenceError(3, w)
        return w.copy()

    with pytest.raises(SolverDivergenceError, match=r"component 1, offset \+1"):
        grad_T(T, np.array([0.5, 0.99, 0.5]), fd_step=0.02)


def test_bad_step():
    with pytest.raises(ValueError):
        grad_T(lambda w: w, np.ones(2), fd_step=0.0)


# -- chain rule, Fisher -------------------------------------------------------

def test_grad_f_omega_oracle():
    rng = np.random.default_rng(4)
    Gf, GT = rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
    naive = np.zeros((5, 3))
    for a in range(5):
        for b in range(3):
            for k in range(6):
                naive[a, b] += Gf[a, k] * GT[k, b]
    np.testing.assert_allclose(grad_f_omega(Gf, GT), naive, rtol=1e-12)
    np.testing.assert_array_equal(grad_f_omega(Gf, np.eye(6)), Gf)
    assert not np.any(grad_f_omega(np.zeros((5, 6)), GT))
    with pytest.raises(DimensionError):
        grad_f_omega(Gf, np.eye(5))


def test_fisher_cases():
    Q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(6, 3)))
    F, Fi = fisher_matrix(Q, np.eye(6))
    np.testing.assert_allclose(F, np.eye(3), atol=1e-12)
    F, Fi = fisher_matrix(np.array([[1.0, 0.0], [0.0, 2.0]]), np.diag([1.0, 4.0]))
    np.testing.assert_allclose(F, np.eye(2), atol=1e-14)
    with pytest.raises(SingularMatrixError):
        fisher_matrix(np.zeros((4, 2)), np.eye(4))


@given(st.integers(0, 2**31))
def test_fisher_inverse_identity(seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(8, 4))
    L = rng.normal(size=(8, 8))
    F, Fi = fisher_matrix(G, L @ L.T / 8 + np.eye(8))
    assert np.allclose(F, F.T)
    np.testing.assert_allclose(F @ Fi, np.eye(4), atol=1e-10)


# -- compression --------------------------------------------------------------

def test_compress_fiducial_and_affinity():
    bhm, exp, comp, C, _ = synthetic_chain()
    w0 = compress(exp.f0, comp, exp.f0, exp.C0)
    np.testing.assert_allclose(w0, bhm.omega0, rtol=1e-12)
    rng = np.random.default_rng(2)
    p1, p2 = exp.f0 + rng.normal(size=20), exp.f0 + rng.normal(size=20)
    lhs = C(p1 + p2 - exp.f0) - bhm.omega0
    rhs = (C(p1) - bhm.omega0) + (C(p2) - bhm.omega0)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)
    batch = C(np.stack([p1, p2]))
    np.testing.assert_allclose(batch[1], C(p2), rtol=1e-14)


def test_quasi_mle_unbiased_and_efficient_in_linear_regime():
    bhm, exp, comp, C, _ = synthetic_chain()
    w_star = bhm.omega0 + 0.1
    n = 10_000
    w = C(bhm.simulate_batch(np.tile(bhm.latent(w_star), (n, 1)), stream(0, "qmle")))
    se = w.std(0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(w.mean(0) - w_star) < 4 * se)
    cov = np.cov(w.T)
    Fi = comp.fisher_inverse
    se_cov = np.sqrt((Fi**2 + np.outer(np.diag(Fi), np.diag(Fi))) / (n - 1))
    assert np.all(np.abs(cov - Fi) < 5 * se_cov)


def test_compress_rejects_foreign_layout():
    cfg = ObserverConfig()
    bhm = LotkaVolterraBHM(cfg, "A")
    w0 = ParamPrior.benchmark().mean
    theta0 = bhm.latent(w0)
    rng = np.random.default_rng(0)
    G = rng.normal(size=(cfg.P, cfg.S))
    exp = ExpansionArtifacts(theta0, np.zeros(cfg.P), np.eye(cfg.P), G, np.ones(cfg.S), 0, 0, layout=cfg.keep)
    comp = build_compression_artifacts(exp, bhm.latent, w0)
    other = ObserverConfig(mask_x=np.ones(50), mask_y=np.r_[np.zeros(10), np.ones(40)])
    with pytest.raises(IncompatibleDataError):
        compress(LotkaVolterraBHM(other).data_vector(np.zeros(90)), comp, exp.f0, exp.C0)
    with pytest.raises(IncompatibleDataError):
        compress(np.zeros(80), comp, exp.f0, exp.C0)


def test_recycling_makes_no_stochastic_calls():
    class Counting(LotkaVolterraBHM):
        calls = 0

        def simulate(self, theta, rng):
            Counting.calls += 1
            return super().simulate(theta, rng)

        def simulate_batch(self, thetas, rng):
            Counting.calls += len(np.atleast_2d(thetas))
            return super().simulate_batch(thetas, rng)

    cfg = ObserverConfig()
    bhm = Counting(cfg, "A")
    w0 = ParamPrior.benchmark().mean
    theta0 = bhm.latent(w0)
    rng = np.random.default_rng(0)
    exp = ExpansionArtifacts(theta0, np.zeros(90), np.eye(90), rng.normal(size=(90, 100)), np.ones(100), 0, 0)
    build_compression_artifacts(exp, bhm.latent, w0)
    assert Counting.calls == 0


# -- Fisher-Rao -------------------------------------------------------------

def test_fisher_rao_basics():
    assert fisher_rao_distance([1.0, 2.0], [1.0, 2.0], np.eye(2)) == 0
    assert fisher_rao_distance([1.0, 0.0], [0.0, 0.0], np.eye(2)) == pytest.approx(1.0)
    rng = np.random.default_rng(3)
    L = rng.normal(size=(4, 4))
    F = L @ L.T + np.eye(4)
    a, b = rng.normal(size=4), rng.normal(size=4)
    q = 0.0
    for i in range(4):
        for j in range(4):
            q += (a - b)[i] * F[i, j] * (a - b)[j]
    assert fisher_rao_distance(a, b, F) == pytest.approx(np.sqrt(q), rel=1e-12)


@given(st.integers(0, 2**31))
def test_fisher_rao_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(4, 4))
    F = L @ L.T + 0.1 * np.eye(4)
    a, b, c = rng.normal(size=(3, 4))
    dab = fisher_rao_distance(a, b, F)
    assert dab >= 0
    assert dab == pytest.approx(fisher_rao_distance(b, a, F), rel=1e-12)
    assert dab <= fisher_rao_distance(a, c, F) + fisher_rao_distance(c, b, F) + 1e-12


# -- rejection sampling -----------------------------------------------------

def test_infinite_tolerance_reproduces_prior():
    prior = ParamPrior.benchmark()
    bhm = LotkaVolterraBHM()
    theta0 = bhm.latent(prior.mean)
    rng = np.random.default_rng(0)
    exp = ExpansionArtifacts(theta0, np.zeros(90), np.eye(90), rng.normal(size=(90, 100)), np.ones(100), 0, 0)
    comp = build_compression_artifacts(exp, bhm.latent, prior.mean)
    chain = SummarySimulator(bhm, Compressor(comp, exp.f0, exp.C0))
    res = rejection_sample(prior, chain, prior.mean, comp.fisher, np.inf, 10_000, 10_000, seed=1)
    assert res.n_accepted == 10_000
    for k in range(4):
        p = stats.kstest(res.samples[:, k], "norm", args=(prior.mean[k], prior.std[k])).pvalue
        assert p > 0.01


def test_determinism_across_threads_and_first_by_index():
    bhm, exp, comp, C, prior = synthetic_chain()
    obs = C(bhm.simulate(bhm.latent(bhm.omega0 + 0.05), stream(0, "obs")))
    chain = SummarySimulator(bhm, C)
    a = rejection_sample(prior, chain, obs, comp.fisher, 2.0, 300, 100_000, seed=7, block_size=200, threads=1)
    b = rejection_sample(prior, chain, obs, comp.fisher, 2.0, 300, 100_000, seed=7, block_size=200, threads=8)
    assert a.csv_text() == b.csv_text()
    assert a.n_accepted == 300
    hits = np.flatnonzero(a.distances < 2.0)
    np.testing.assert_array_equal(np.flatnonzero(a.accepted), hits[:300])
    assert np.all(a.distances[a.accepted] < 2.0)


def test_tighter_tolerance_shrinks_posterior():
    bhm, exp, comp, C, prior = synthetic_chain()
    obs = C(bhm.simulate(bhm.latent(bhm.omega0), stream(1, "obs")))
    chain = SummarySimulator(bhm, C)
    traces = []
    for eps in (np.inf, 4.0, 2.0):
        res = rejection_sample(prior, chain, obs, comp.fisher, eps, 3000, 2_000_000, seed=2)
        traces.append(np.trace(np.cov(res.samples.T)))
    assert traces[0] >= traces[1] >= traces[2]


def test_budget_exhaustion_carries_partial_results():
    bhm, exp, comp, C, prior = synthetic_chain()
    obs = C(exp.f0)
    with pytest.raises(BudgetExhausted) as err:
        rejection_sample(prior, SummarySimulator(bhm, C), obs, comp.fisher, 0.05, 1000, 1500,
                         block_size=500)
    part = err.value.partial
    assert part.n_draws == 1500 and part.n_accepted < 1000


def test_rejection_preconditions():
    bhm, exp, comp, C, prior = synthetic_chain()
    with pytest.raises(ValueError):
        rejection_sample(prior, SummarySimulator(bhm, C), bhm.omega0, comp.fisher, 0.0)


def test_divergent_draws_are_never_accepted():
    cfg = ObserverConfig(dt=1.0, n_steps=300, mask_x=np.ones(300), mask_y=np.ones(300))
    bhm = LotkaVolterraBHM(cfg, "A")

    class Identity:
        def __call__(self, phi):
            return np.atleast_2d(phi)[:, :4]

    omegas = np.array([[0.55, 0.2, 0.2, 0.05], [80.0, 0.0, 0.0, 0.0]])
    out = SummarySimulator(bhm, Identity())(omegas, stream(0, "d"))
    assert np.all(np.isfinite(out[0])) and np.all(np.isnan(out[1]))


def test_csv_layout():
    bhm, exp, comp, C, prior = synthetic_chain()
    res = rejection_sample(prior, SummarySimulator(bhm, C), C(exp.f0), comp.fisher, 3.0, 20, 10_000,
                           block_size=100, names=("alpha", "beta", "gamma", "delta"))
    rows = list(csv.reader(io.StringIO(res.csv_text(accepted_only=True))))
    assert rows[0] == ["alpha", "beta", "gamma", "delta", "d_FR", "accepted"]
    assert len(rows) == 21 and all(r[-1] == "1" for r in rows[1:])
    assert float(rows[1][0]) == res.samples[0, 0]


# -- summaries --------------------------------------------------------------

def test_identical_samples():
    s = posterior_summaries(np.tile([1.0, 2.0, 3.0, 4.0], (10, 1)))
    assert not np.any(s.covariance)
    for iv in s.intervals.values():
        np.testing.assert_array_equal(iv[:, 0], iv[:, 1])


def test_gaussian_moments_and_coverage():
    rng = np.random.default_rng(11)
    mean = np.array([1.0, -2.0, 0.5, 3.0])
    cov = np.diag([0.5, 1.0, 2.0, 0.1])
    n = 20_000
    x = rng.multivariate_normal(mean, cov, n)
    s = posterior_summaries(x)
    assert np.all(np.abs(s.mean - mean) < 4 * np.sqrt(np.diag(cov) / n))
    assert np.all(np.abs(s.std - np.sqrt(np.diag(cov))) < 4 * np.sqrt(np.diag(cov) / (2 * n)))
    fresh = rng.multivariate_normal(mean, cov, n)
    lo, hi = s.intervals["2sigma"].T
    frac = np.mean((fresh >= lo) & (fresh <= hi), axis=0)
    assert np.all(np.abs(frac - 0.9545) < 0.01)
    payload = json.loads(s.histograms_json())
    assert len(payload["pairs"]) == 6
    assert sum(map(sum, payload["pairs"][0]["counts"])) == n
    assert "2sigma_lo" in s.table_csv().splitlines()[0]


def test_too_few_samples():
    with pytest.raises(InsufficientDataError):
        posterior_summaries(np.ones((1, 4)))
