import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cosmicqubit.detcal import (DEFAULT_COMBOS, CalibrationModel, ResponseParams, acceptance_probability,
                                amplitude_density, amplitude_edges, amplitude_pdf, cluster_pulses, deposit_pdf,
                                energy_grid, expected_counts, fit_response, format_params_table, observed_spectra,
                                poisson_deviance, response_matrix, response_matrix_reference)
from cosmicqubit.fluxmc import FluxModel, SamplerConfig, throw_batch
from cosmicqubit.geometry import run_transport
from cosmicqubit.layout import DETECTOR_EFFICIENCY, DETECTORS, FLUX, default_scene
from cosmicqubit.streamsim import smear_energy

T_RUN = 266.531 * 3600
TRUTH = {k: ResponseParams(k, v[2], v[3], v[4], v[5]) for k, v in DETECTORS.items()}


def test_params_validation():
    for bad in [(0.0, 0.1, 1, 2), (1.0, -0.1, 1, 2), (1.0, 0.1, 2, 2)]:
        with pytest.raises(ValueError):
            ResponseParams("X", *bad)
    p = ResponseParams("A", 14.971, 0.063, 50, 450)
    assert p.e_window == pytest.approx((50 / 14.971, 450 / 14.971))
    assert p.sigma(5.0) == pytest.approx(0.063 * 5.0)


def test_b_zero_is_rescale():
    edges = energy_grid(10.0, 256)
    rng = np.random.default_rng(0)
    m = deposit_pdf(rng.gamma(4.0, 1.0, 50_000), edges)
    a = 13.0
    p = ResponseParams("A", a, 0.0, 1.0, 2.0)
    out = amplitude_pdf(m, edges, p, a * edges)
    assert np.allclose(out, m, atol=1e-14)
    # half-cell bins split each cell mass evenly
    fine = np.linspace(0, edges[-1], 2 * 256 + 1) * a
    half = amplitude_pdf(m, edges, p, fine)
    assert np.allclose(half[0::2], m / 2) and np.allclose(half[1::2], m / 2)


def test_line_width():
    edges = np.linspace(0.0, 15.0, 3001)
    m = deposit_pdf([5.0], edges)
    a = 20.0
    v = np.linspace(0, 15 * a, 6001)
    dens = amplitude_density(m, edges, ResponseParams("A", a, 0.1, 1, 2), v)
    c = 0.5 * (v[1:] + v[:-1])
    w = dens * np.diff(v)
    mu = np.sum(w * c)
    sd = np.sqrt(np.sum(w * (c - mu) ** 2))
    assert mu / a == pytest.approx(5.0025, rel=1e-3)  # cell center
    assert sd / mu == pytest.approx(0.10, rel=0.01)


def _oracle_density(e_samples, a, b, v):
    # direct sum of truncated Gaussians over a fine set of deposit values
    s = b * np.sqrt(5.0 * e_samples)
    z = stats.norm.sf(0, e_samples, s)
    d = stats.norm.pdf(v[:, None] / a, e_samples[None, :], s[None, :]) / z[None, :] / a
    return d.mean(axis=1)


def test_peak_position_vs_direct_convolution():
    # muon-peak-like shape: Moyal-distributed deposits
    e = stats.moyal.ppf(np.linspace(0.0005, 0.9995, 4000), loc=4.0, scale=0.35)
    e = e[e < 14.0]
    edges = energy_grid(10.0)
    m = deposit_pdf(e, edges)
    a, b = 14.971, 0.063
    v = np.linspace(20, 200, 1801)
    c = 0.5 * (v[1:] + v[:-1])
    ours = amplitude_density(m, edges, ResponseParams("A", a, b, 1, 2), v)
    ref = _oracle_density(e, a, b, c)
    assert c[np.argmax(ours)] == pytest.approx(c[np.argmax(ref)], rel=0.005)
    assert np.max(np.abs(ours - ref)) < 0.02 * ref.max()


def test_kernel_matches_reference():
    edges = energy_grid(20.0, 300)
    v = np.linspace(0, 500, 120)
    for b in (0.0, 0.02, 0.1, 0.4):
        assert np.allclose(response_matrix(edges, v, 15.0, b), response_matrix_reference(edges, v, 15.0, b),
                           atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(1.0, 30.0), st.floats(0.0, 0.3))
def test_normalization(a, b):
    edges = energy_grid(10.0, 200)
    v = np.linspace(0.0, a * 15.0 * 1.6 + 10 * a, 3000)
    k = response_matrix(edges, v, a, b)
    assert np.all(np.abs(k.sum(axis=0) - 1.0) < 1e-6)
    assert np.all(k >= 0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.2), st.floats(1.2, 3.0), st.integers(0, 10_000))
def test_variance_grows_with_b(b, factor, seed):
    edges = energy_grid(10.0, 400)
    m = deposit_pdf(np.random.default_rng(seed).gamma(6.0, 0.7, 2000), edges)
    v = np.linspace(0, 10 * 15 * 1.6, 4000)
    c = 0.5 * (v[1:] + v[:-1])

    def var(bb):
        w = amplitude_pdf(m, edges, ResponseParams("A", 10.0, bb, 1, 2), v)
        mu = np.sum(w * c)
        return np.sum(w * (c - mu) ** 2)

    assert var(b * factor) > var(b)


def test_expected_counts():
    p = np.array([0.2, 0.5, 0.3])
    assert np.all(expected_counts(p, 3.0, 0.0) == 0)
    assert expected_counts(p, 3.0, 100.0).sum() == pytest.approx(300.0, rel=1e-12)


def test_expected_counts_total_from_response():
    edges = energy_grid(10.0)
    m = deposit_pdf(np.random.default_rng(1).gamma(5.0, 0.8, 10_000), edges)
    v = np.linspace(0, 500, 200)
    n = expected_counts(amplitude_pdf(m, edges, ResponseParams("A", 12.0, 0.08, 1, 2), v), 0.7, 1e4)
    assert n.sum() == pytest.approx(7000.0, rel=1e-6)


def test_expected_counts_vs_pulse_counting():
    # deposits from the real geometry; amplitudes drawn by the pulse simulator
    cfg = SamplerConfig(200.0, 200_000, 5, center=(0.0, 0.0, -60.0))
    table = run_transport(throw_batch(cfg, FluxModel()), default_scene(with_chip=False))
    _, mat = table.dense()
    e = mat[:, table.labels.index("A")]
    e = e[e > 0]
    p = TRUTH["A"]
    v = amplitude_edges(p, 40)
    edges = energy_grid(p.v_hi / p.a * 1.5)
    rate = FLUX * table.tangent_area / table.total_thrown * len(e)
    exp = expected_counts(amplitude_pdf(deposit_pdf(e, edges), edges, p, v), rate, 1000.0)
    # same deposits, thinned to the same expected total, smeared and histogrammed
    rng = np.random.default_rng(2)
    pick = e[rng.random(len(e)) < rate * 1000.0 / len(e)] if rate * 1000 < len(e) else e
    obs = np.histogram(p.a * smear_energy(pick, p.b, rng), v)[0]
    scale = len(pick) / (rate * 1000.0)
    ok = exp > 5
    chi = np.sum((obs[ok] - exp[ok] * scale) ** 2 / (exp[ok] * scale))
    assert stats.chi2.sf(chi, ok.sum()) > 0.001


def test_deviance_values():
    assert poisson_deviance([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert poisson_deviance([10.0], [12.0]) == pytest.approx(10 - 12 + 12 * np.log(12) - 12 * np.log(10), rel=1e-14)
    assert poisson_deviance([10.0], [12.0]) == pytest.approx(0.1878587, abs=1e-7)  # 12 ln 1.2 - 2
    assert poisson_deviance([2.5], [0.0]) == 2.5
    assert poisson_deviance([0.0, 1.0], [1.0, 1.0]) == np.inf
    assert poisson_deviance([0.0], [0.0]) == 0.0


@given(st.lists(st.tuples(st.floats(0.01, 1e4), st.integers(0, 10_000)), min_size=1, max_size=30),
       st.randoms(use_true_random=False))
def test_deviance_properties(pairs, r):
    e = np.array([p[0] for p in pairs])
    o = np.array([p[1] for p in pairs], float)
    d = poisson_deviance(e, o)
    assert d >= -1e-9 * np.sum(e + o)
    perm = list(range(len(e)))
    r.shuffle(perm)
    assert poisson_deviance(e[perm], o[perm]) == pytest.approx(d, rel=1e-9, abs=1e-9)
    k = len(e) // 2
    assert poisson_deviance(e[:k], o[:k]) + poisson_deviance(e[k:], o[k:]) == pytest.approx(d, rel=1e-9, abs=1e-9)


def test_deviance_chi2_calibration():
    rng = np.random.default_rng(3)
    e = rng.uniform(20, 200, 100)
    two_d = np.array([2 * poisson_deviance(e, rng.poisson(e)) for _ in range(1000)])
    assert two_d.mean() == pytest.approx(100, rel=0.10)


def test_acceptance_probability():
    p = ResponseParams("A", 10.0, 0.0, 50.0, 100.0)
    assert acceptance_probability([4.9, 5.0, 7.0, 10.0, 10.1], p).tolist() == [0, 1, 1, 1, 0]
    q = ResponseParams("A", 10.0, 0.1, 50.0, 100.0)
    x = acceptance_probability([7.5], q)[0]
    rng = np.random.default_rng(0)
    s = rng.normal(7.5, 0.1 * np.sqrt(5 * 7.5), 400_000)
    s = s[s > 0]
    assert x == pytest.approx(np.mean((s >= 5) & (s <= 10)), abs=3e-3)


def test_cluster_pulses():
    assert cluster_pulses(np.array([], np.int64)).size == 0
    t = np.array([0, 400, 900, 2500, 2600, 10_000])
    assert cluster_pulses(t).tolist() == [0, 0, 0, 1, 1, 2]


def test_observed_spectra_conditions():
    params = {"A": ResponseParams("A", 10, 0, 50, 100), "B": ResponseParams("B", 10, 0, 50, 100)}
    edges = {k: np.array([0.0, 50.0, 100.0, 200.0]) for k in params}
    # cluster 1: A and B in window; cluster 2: A in window, B above; cluster 3: B alone
    t = np.array([0, 10, 5000, 5010, 9000])
    det = np.array([0, 1, 0, 1, 1])
    amp = np.array([70.0, 80.0, 60.0, 150.0, 90.0])
    out = observed_spectra(("A", "B"), det, t, amp, params, edges, combos=(("A",), ("B",), ("A", "B")))
    assert out[(("A",), "A")].tolist() == [0, 2, 0]
    assert out[(("B",), "B")].tolist() == [0, 2, 1]
    assert out[(("A", "B"), "A")].tolist() == [0, 1, 0]
    assert out[(("A", "B"), "B")].tolist() == [0, 1, 1]


@pytest.fixture(scope="module")
def calibration_model():
    cfg = SamplerConfig(200.0, 400_000, 17, center=(0.0, 0.0, -60.0))
    table = run_transport(throw_batch(cfg, FluxModel()), default_scene(with_chip=False))
    _, mat = table.dense()
    ve = {k: amplitude_edges(p, 80) for k, p in TRUTH.items()}
    etop = {k: p.v_hi / p.a * 1.5 for k, p in TRUTH.items()}
    return CalibrationModel(table.labels, mat, table.tangent_area / table.total_thrown, T_RUN, ve,
                            DEFAULT_COMBOS, etop)


def test_model_expected_nonnegative(calibration_model):
    exp = calibration_model.expected(TRUTH, DETECTOR_EFFICIENCY, FLUX)
    assert all(np.all(v >= 0) for v in exp.values())
    # the coincidence condition only removes counts
    for (combo, k), v in exp.items():
        if len(combo) > 1:
            assert v.sum() <= exp[((k,), k)].sum()


def test_fit_closure(calibration_model):
    rng = np.random.default_rng(0)
    exp = calibration_model.expected(TRUTH, DETECTOR_EFFICIENCY, FLUX)
    obs = {k: rng.poisson(v).astype(float) for k, v in exp.items()}
    init = {k: ResponseParams(k, p.a * 1.3, p.b, p.v_lo, p.v_hi) for k, p in TRUTH.items()}
    res = fit_response(calibration_model, obs, init)
    for k, p in TRUTH.items():
        assert res.params[k].a == pytest.approx(p.a, rel=0.01)
        assert res.params[k].b == pytest.approx(p.b, rel=0.15)
        assert np.isfinite(res.errors["a_" + k]) and res.errors["a_" + k] > 0
    assert res.eps == pytest.approx(DETECTOR_EFFICIENCY, abs=0.01)
    assert res.flux == pytest.approx(FLUX, rel=0.02)
    # deviance at the fit is not above the deviance at the truth
    assert res.cost <= calibration_model.deviance(TRUTH, DETECTOR_EFFICIENCY, FLUX, obs) + 1e-6
    txt = format_params_table(res.params, res.errors)
    assert txt.count("\n") == 7 and txt.splitlines()[1].startswith("A ")
