import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfisbi.errors import DimensionError, SolverDivergenceError
from selfisbi.lotka_volterra import (
    DataVector,
    LatentVector,
    LotkaVolterraBHM,
    ObserverConfig,
    ParamVector,
    censor,
    latent_map_T,
    observational_covariance,
    observe_signal,
    sample_noise_model_A,
    simulate_model_A,
    simulate_model_B,
    solve_lv,
)
from selfisbi.priors import BENCHMARK_OMEGA0, GROUND_TRUTH
from selfisbi.seeding import stream

N = 50


def quiet_config(**kw):
    base = dict(
        dt=1.0, p=0.0, q=0.0, r=0.0, s_noise=0.0, M_x=1e12, M_y=1e12,
        efficiency_x=np.ones(N), efficiency_y=np.ones(N),
        mask_x=np.ones(N), mask_y=np.ones(N),
    )
    base.update(kw)
    return ObserverConfig(**base)


# -- types ------------------------------------------------------------------

def test_param_vector_rejects_non_finite_and_wrong_length():
    with pytest.raises(ValueError):
        ParamVector(0.1, np.nan, 0.1, 0.1)
    with pytest.raises(DimensionError):
        ParamVector.from_array([1.0, 2.0, 3.0])
    assert np.array_equal(ParamVector.from_array(GROUND_TRUTH).as_array(), GROUND_TRUTH)


def test_latent_vector_layout():
    lv = LatentVector(np.arange(10.0))
    assert lv.n_steps == 5
    assert np.array_equal(lv.x, np.arange(5.0)) and np.array_equal(lv.y, np.arange(5.0, 10.0))
    with pytest.raises(DimensionError):
        LatentVector(np.arange(7.0))


def test_observer_config_invariants():
    with pytest.raises(ValueError):
        ObserverConfig(t_noise=1.5)
    with pytest.raises(ValueError):
        ObserverConfig(M_x=0.0)
    with pytest.raises(ValueError):
        ObserverConfig(efficiency_x=np.full(N, 1.2))
    with pytest.raises(ValueError):
        ObserverConfig(mask_y=np.full(N, 2))
    with pytest.raises(DimensionError):
        ObserverConfig(mask_x=np.ones(N + 1))
    c = ObserverConfig()
    assert c.S == 100 and c.P == 90
    assert np.all((c.efficiency_x >= 0.6 - 1e-12) & (c.efficiency_x <= 1.0 + 1e-12))


def test_observer_config_round_trip():
    c = ObserverConfig(p=0.07, M_x=20.0)
    d = ObserverConfig.from_dict(c.to_dict())
    assert d.p == 0.07 and np.array_equal(d.mask_y, c.mask_y)
    assert ObserverConfig.from_dict({"mask_x": "default"}).P == c.P


def test_data_vector_bookkeeping():
    mx = np.array([1, 0, 1])
    my = np.array([0, 1, 1])
    dv = DataVector(np.arange(4.0), mx, my)
    assert dv.P == 4
    assert dv.species.tolist() == [0, 0, 1, 1]
    assert dv.step.tolist() == [0, 2, 1, 2]
    with pytest.raises(DimensionError):
        DataVector(np.arange(5.0), mx, my)


# -- solver -----------------------------------------------------------------

def test_zero_rates_are_a_fixed_point():
    th = solve_lv([0, 0, 0, 0], 10, 5, 1.0, N)
    assert np.all(th.x == 10) and np.all(th.y == 5)


def test_one_step_by_hand():
    th = solve_lv([0.55, 0.2, 0.2, 0.05], 10, 5, 1.0, 2)
    assert th.x[1] == pytest.approx(5.5, abs=1e-12)
    assert th.y[1] == pytest.approx(6.5, abs=1e-12)


@given(
    alpha=st.floats(0.0, 0.3), gamma=st.floats(0.0, 0.9),
    x0=st.floats(0.1, 50), y0=st.floats(0.1, 50),
)
def test_decoupled_geometric_growth(alpha, gamma, x0, y0):
    th = solve_lv([alpha, 0.0, gamma, 0.0], x0, y0, 1.0, 20)
    i = np.arange(20)
    np.testing.assert_allclose(th.x, x0 * (1 + alpha) ** i, rtol=1e-12)
    np.testing.assert_allclose(th.y, y0 * (1 - gamma) ** i, rtol=1e-12, atol=1e-300)


def test_general_dt_is_standard_euler():
    w = np.array(GROUND_TRUTH)
    th = solve_lv(w, 10, 5, 0.3, 3)
    x1 = 10 + 0.3 * 10 * (w[0] - w[1] * 5)
    y1 = 5 + 0.3 * 5 * (w[3] * 10 - w[2])
    assert th.x[1] == pytest.approx(x1) and th.y[1] == pytest.approx(y1)


def test_populations_floored_at_zero():
    th = solve_lv([0.1, 5.0, 0.1, 0.1], 10, 5, 1.0, 10)
    assert th.x[1] == 0.0 and np.all(th.values >= 0)


def test_divergence_names_the_step():
    with pytest.raises(SolverDivergenceError) as err:
        solve_lv([50.0, 0.0, 0.0, 0.0], 10, 5, 1.0, 400)
    assert err.value.step >= 1
    assert "step" in str(err.value)


def test_latent_map_is_deterministic_wrapper():
    c = ObserverConfig()
    a = latent_map_T(BENCHMARK_OMEGA0, c)
    b = latent_map_T(BENCHMARK_OMEGA0, c)
    assert a.values.tobytes() == b.values.tobytes()
    ref = solve_lv(BENCHMARK_OMEGA0, c.x0, c.y0, c.dt, c.n_steps)
    assert np.array_equal(a.values, ref.values)


# -- observers --------------------------------------------------------------

def test_signal_is_delayed_copy_without_perturbation():
    c = quiet_config()
    th = latent_map_T(GROUND_TRUTH, c)
    s_x, s_y = observe_signal(th.values, c)
    assert s_x[0] == c.x0 and s_y[0] == c.y0
    np.testing.assert_array_equal(s_x[1:], th.x[:-1])
    np.testing.assert_array_equal(s_y[1:], th.y[:-1])


def test_signal_by_hand():
    c = quiet_config(p=0.05, q=0.01)
    theta = np.concatenate([np.full(N, 10.0), np.full(N, 5.0)])
    s_x, s_y = observe_signal(theta, c)
    assert s_x[1] == pytest.approx(8.5)
    assert s_y[1] == pytest.approx(5 + 0.05 * 50 - 0.01 * 25)


def test_zero_efficiency_zeroes_signal():
    eff = np.ones(N)
    eff[3] = 0.0
    c = quiet_config(efficiency_x=eff)
    s_x, _ = observe_signal(latent_map_T(GROUND_TRUTH, c).values, c)
    assert s_x[4] == 0.0


def test_signal_length_mismatch():
    with pytest.raises(DimensionError):
        observe_signal(np.ones(10), ObserverConfig())


def test_noiseless_limit():
    c = quiet_config()
    noise = sample_noise_model_A(latent_map_T(GROUND_TRUTH, c).values, c, stream(0, "t"))
    for n in noise:
        assert np.all(n == 0)


def test_empty_prey_population_kills_cross_terms():
    cov = observational_covariance(0.0, 7.0, 0.05, 0.2)
    assert cov[0, 1] == 0 and cov[1, 0] == 0 and cov[1, 1] == 0
    c = ObserverConfig(n_steps=4, mask_x=np.ones(4), mask_y=np.ones(4))
    theta = np.array([0.0] * 4 + [3.0] * 4)
    n_D_x, _, _, n_O_y = sample_noise_model_A(theta, c, stream(0, "empty"))
    assert np.all(n_D_x == 0) and np.all(n_O_y == 0)


def test_demographic_variance_monte_carlo():
    c = ObserverConfig(n_steps=4, mask_x=np.ones(4), mask_y=np.ones(4), r=0.15)
    thetas = np.tile(np.array([10.0] * 4 + [5.0] * 4), (100_000, 1))
    from selfisbi.lotka_volterra import sample_noise_model_A_batch

    n_D_x = sample_noise_model_A_batch(thetas, c, stream(3, "var"))[0][:, 0]
    var = n_D_x.var(ddof=1)
    se = 1.5 * np.sqrt(2 / (n_D_x.size - 1))
    assert abs(var - 1.5) < 3 * se


@given(
    x=st.floats(0, 1e4), y=st.floats(0, 1e4),
    s=st.floats(0, 10), t=st.floats(-1, 1),
)
def test_observational_covariance_is_psd(x, y, s, t):
    eig = np.linalg.eigvalsh(observational_covariance(x, y, s, t))
    assert eig.min() >= -1e-9 * max(1.0, abs(eig).max())


def test_censor_noop_and_threshold_and_full_mask():
    c = quiet_config(M_x=40.0)
    u_x = np.full(N, 3.0)
    u_y = np.full(N, 2.0)
    assert np.array_equal(censor(u_x, u_y, c).values, np.concatenate([u_x, u_y]))
    u_x[7] = 50.0
    assert censor(u_x, u_y, c).values[7] == 40.0
    c2 = quiet_config(mask_x=np.zeros(N))
    dv = censor(u_x, u_y, c2)
    assert dv.P == N and np.all(dv.species == 1)


@given(st.floats(1.0, 30.0), st.floats(0.0, 30.0), st.integers(0, 2**31))
def test_censor_monotone_in_threshold(M, extra, seed):
    rng = np.random.default_rng(seed)
    u_x, u_y = rng.uniform(0, 60, N), rng.uniform(0, 60, N)
    lo = censor(u_x, u_y, ObserverConfig(M_x=M, M_y=M)).values
    hi = censor(u_x, u_y, ObserverConfig(M_x=M + extra, M_y=M + extra)).values
    assert np.all(hi >= lo)


def test_masking_only_removes_entries():
    rng = np.random.default_rng(1)
    u_x, u_y = rng.uniform(0, 5, N), rng.uniform(0, 5, N)
    full = censor(u_x, u_y, quiet_config())
    part = censor(u_x, u_y, ObserverConfig(M_x=1e9, M_y=1e9))
    kept = np.concatenate([part.step[part.species == 0], N + part.step[part.species == 1]])
    assert np.array_equal(part.values, full.values[kept])


def test_model_A_noiseless_composition_is_delay():
    c = quiet_config()
    th = latent_map_T(GROUND_TRUTH, c)
    dv = simulate_model_A(th.values, c, stream(0, "a"))
    expected = np.concatenate([[c.x0], th.x[:-1], [c.y0], th.y[:-1]])
    np.testing.assert_array_equal(dv.values, expected)


def test_model_A_respects_thresholds_and_is_reproducible():
    c = ObserverConfig()
    th = latent_map_T(GROUND_TRUTH, c).values
    a = simulate_model_A(th, c, stream(5, "mock"))
    b = simulate_model_A(th, c, stream(5, "mock"))
    assert a.values.tobytes() == b.values.tobytes()
    assert a.P == 90
    assert np.all(a.values[a.species == 0] <= c.M_x) and np.all(a.values[a.species == 1] <= c.M_y)


def test_model_A_mean_matches_signal():
    # thresholds lifted so the zero-mean noise is the only stochastic part
    c = ObserverConfig(M_x=1e9, M_y=1e9)
    bhm = LotkaVolterraBHM(c, "A")
    th = bhm.latent(BENCHMARK_OMEGA0)
    draws = bhm.simulate_batch(np.tile(th, (10_000, 1)), stream(2, "mean"))
    s_x, s_y = observe_signal(th, c)
    signal = np.concatenate([s_x, s_y])[c.keep]
    se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
    z = np.abs(draws.mean(axis=0) - signal) / np.where(se > 0, se, 1.0)
    # 90 entries at 3 sigma: allow the odd excursion, but not a bias
    assert np.mean(z < 3) > 0.95 and np.max(z) < 4.5


def test_model_B_noiseless_and_mean():
    c = ObserverConfig(r_B=0.0)
    th = latent_map_T(GROUND_TRUTH, c).values
    assert np.array_equal(simulate_model_B(th, c, stream(0, "b")).values, th[c.keep])
    c = ObserverConfig()
    bhm = LotkaVolterraBHM(c, "B")
    th = bhm.latent(BENCHMARK_OMEGA0)
    draws = bhm.simulate_batch(np.tile(th, (10_000, 1)), stream(4, "meanB"))
    se = draws.std(axis=0, ddof=1) / 100
    z = np.abs(draws.mean(axis=0) - th[c.keep]) / se
    assert np.mean(z < 3) > 0.95 and np.max(z) < 4.5
    a = simulate_model_B(th, c, stream(9, "x"))
    assert a.values.tobytes() == simulate_model_B(th, c, stream(9, "x")).values.tobytes()


def test_bhm_model_selector():
    with pytest.raises(ValueError):
        LotkaVolterraBHM(model="C")
