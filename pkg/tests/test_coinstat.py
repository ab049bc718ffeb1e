import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cosmicqubit.burstdetect import Event
from cosmicqubit.coinstat import (CyclePulses, NoSignalError, RateError, WindowConfig, accidental_rate,
                                  background_bin_fraction, background_histogram, decompose_rates,
                                  estimate_flux_and_efficiency, garwood, nearest_delay_cycles, nearest_delays,
                                  rate_from_counts, snr_vs_window)
from cosmicqubit.fluxmc import FluxModel, SamplerConfig, throw_batch
from cosmicqubit.geometry import CoverageError, cross_sections, run_transport
from cosmicqubit.layout import DETECTORS, default_scene

DT = 15.274e-6
T_RUN = 266.531 * 3600


def test_window_config():
    w = WindowConfig()
    assert w.seconds == pytest.approx(45.821e-6, abs=1e-9)
    assert w.half == 1
    with pytest.raises(ValueError):
        WindowConfig(4)


def test_rate_from_counts():
    assert rate_from_counts(0, 1000, 1.0) == 0.0
    r = rate_from_counts(9460, T_RUN / DT, DT)
    assert 1 / r == pytest.approx(101.4, abs=0.1)
    with pytest.raises(RateError):
        rate_from_counts(10, 10, 1.0)
    with pytest.raises(RateError):
        rate_from_counts(11, 10, 1.0)


def test_rate_estimator_unbiased():
    rng = np.random.default_rng(0)
    n_windows, w, r = 100_000, 1.0, 0.2
    n = rng.binomial(n_windows, -np.expm1(-r * w), 10_000)
    est = rate_from_counts(n, n_windows, w)
    assert abs(est.mean() - r) < 3 * est.std() / np.sqrt(len(est))
    # sparse regime: Poisson counts
    n = rng.poisson(1e-3 * T_RUN, 10_000)
    est = rate_from_counts(n, T_RUN / DT, DT)
    assert abs(est.mean() - 1e-3) < 3 * est.std() / np.sqrt(len(est))


def test_garwood_known_values():
    lo, hi = garwood(0)
    assert lo == 0 and hi == pytest.approx(1.841, abs=1e-3)
    lo, hi = garwood(10)
    assert lo == pytest.approx(6.891, abs=1e-3) and hi == pytest.approx(14.267, abs=1e-3)


def _brute_nearest(ev_e, ev_c, p_e, p_c):
    out = []
    for e, c in zip(ev_e, ev_c):
        d = p_c[p_e == e] - c
        if len(d) == 0:
            out.append(np.inf)
            continue
        best = min(d, key=lambda x: (abs(x), x))  # earlier pulse wins ties
        out.append(float(best))
    return np.array(out)


def test_nearest_examples():
    assert nearest_delay_cycles([0], [100], [0], [100]).tolist() == [0.0]
    assert nearest_delay_cycles([0], [100], [0, 0], [98, 102]).tolist() == [-2.0]
    assert nearest_delay_cycles([0], [100], [1], [100]).tolist() == [np.inf]
    assert nearest_delay_cycles([0], [100], [], []).tolist() == [np.inf]


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 500)), max_size=40),
       st.lists(st.tuples(st.integers(0, 2), st.integers(0, 500)), min_size=1, max_size=20))
def test_nearest_matches_brute_force(pulses, events):
    p = np.array(pulses, np.int64).reshape(-1, 2)
    ev = np.array(events, np.int64)
    got = nearest_delay_cycles(ev[:, 0], ev[:, 1], p[:, 0], p[:, 1])
    assert np.array_equal(got, _brute_nearest(ev[:, 0], ev[:, 1], p[:, 0], p[:, 1]))


@given(st.integers(-10**6, 10**6))
def test_translation_symmetry(shift):
    rng = np.random.default_rng(1)
    pc = rng.integers(10**6, 2 * 10**6, 300)
    ec = rng.integers(10**6, 2 * 10**6, 50)
    a = nearest_delay_cycles(np.zeros(50), ec, np.zeros(300), pc)
    b = nearest_delay_cycles(np.zeros(50), ec + shift + 10**6, np.zeros(300), pc + shift + 10**6)
    assert np.array_equal(a, b)


def test_nearest_delay_distribution():
    # one event per entry, pulses Poisson at q per cycle:
    # P(|d| >= k) = (1 - q1)^(2k - 1) with q1 = 1 - exp(-q)
    rng = np.random.default_rng(2)
    n_ent, n_cyc, q = 20_000, 4000, 0.002
    counts = rng.poisson(q * n_cyc, n_ent)
    pe = np.repeat(np.arange(n_ent), counts)
    pc = rng.integers(0, n_cyc, counts.sum())
    d = np.abs(nearest_delay_cycles(np.arange(n_ent), np.full(n_ent, 2000), pe, pc))
    q1 = -np.expm1(-q)
    edges = np.r_[0, 1, np.arange(50, 2001, 50)]
    surv = lambda k: np.where(k == 0, 1.0, (1 - q1) ** (2 * k - 1))
    p = np.r_[surv(edges[:-1]) - surv(edges[1:]), surv(edges[-1])]
    obs = np.r_[np.histogram(d, edges)[0], np.count_nonzero(d >= edges[-1])]
    exp = p * n_ent
    ok = exp > 5
    chi = np.sum((obs[ok] - exp[ok]) ** 2 / exp[ok])
    assert stats.chi2.sf(chi, ok.sum() - 1) > 0.01


def test_nearest_delays_catalog():
    pulses = CyclePulses(("A", "B"), np.array([0, 0, 1]), np.array([10, 30, 5]), np.array([0, 1, 0]))
    events = [Event(0, 12, 0, 200.0), Event(1, 100, 0, 200.0), Event(2, 0, 0, 200.0)]
    ia = nearest_delays(events, pulses, per_detector=True)
    assert ia.delays.tolist() == [-2.0, -95.0, np.inf]
    assert ia.per_detector["B"].tolist() == [18.0, np.inf, np.inf]
    assert ia.coincident(WindowConfig(5)).tolist() == [True, False, False]


def test_accidental_reference_value():
    acc = accidental_rate(1 / 101.43, 1 / 4320, 1 / 66.616e-3, 45.821e-6)
    assert 1 / acc / 3600 == pytest.approx(41.9, rel=0.01)
    assert accidental_rate(1.0, 0.1, 0.0, 1e-3) == 0.0
    with pytest.raises(RateError):
        accidental_rate(0.1, 0.2, 1.0, 1e-3)


def _independent_streams(seed, r_q=0.5, r_s=15.0, T=20_000.0):
    rng = np.random.default_rng(seed)
    n_cyc = int(T / DT)
    ec = np.sort(rng.choice(n_cyc, rng.poisson(r_q * T), replace=False))
    pc = np.unique(rng.integers(0, n_cyc, rng.poisson(r_s * T)))
    return n_cyc, ec, pc


def test_accidentals_match_counted():
    T, r_q, r_s = 20_000.0, 0.5, 15.0
    n_cyc, ec, pc = _independent_streams(3, r_q, r_s, T)
    d = nearest_delay_cycles(np.zeros(len(ec)), ec, np.zeros(len(pc)), pc)
    n_qs = np.count_nonzero(np.abs(d) <= 1)
    r_q_hat = len(ec) / T
    pred = accidental_rate(r_q_hat, 0.0, len(pc) / T, 3 * DT) * T
    assert abs(n_qs - pred) < 3 * np.sqrt(pred)


def test_background_histogram_shape():
    c = np.array([-5e-3, -1e-3, 1e-3, 5e-3])
    h = background_histogram(0.01, 0.001, 15.0, 200 * DT, c, 1e6)
    assert h[0] == pytest.approx(h[3], rel=1e-12) and h[1] == pytest.approx(h[2], rel=1e-12)
    assert background_histogram(0.01, 0.0, 15.0, 200 * DT, [100.0], 1e6)[0] < 1e-300
    # closed form for a bin clear of the window
    t, w, rs = 5e-3, 200 * DT, 15.0
    closed = (0.01 - 0.001) * np.exp(-2 * rs * t) * np.sinh(rs * w) * 1e6
    assert h[3] == pytest.approx(closed, rel=1e-12)


def test_background_integrates_to_events():
    w = 200 * DT
    edges = np.r_[-np.inf, np.arange(-100, 101) * w + w / 2, np.inf]
    frac = background_bin_fraction(edges[:-1], edges[1:], 15.0)
    assert frac.sum() == pytest.approx(1.0, abs=1e-12)


def test_background_histogram_chi2():
    T, r_q, r_s = 40_000.0, 0.5, 15.0
    n_cyc, ec, pc = _independent_streams(4, r_q, r_s, T)
    d = nearest_delay_cycles(np.zeros(len(ec)), ec, np.zeros(len(pc)), pc)
    # 200-cycle bins centered on zero; edges at half cycles so integer delays never sit on an edge
    edges = (np.arange(-40, 41) * 200 + 100 - 0.5)
    obs = np.histogram(d, edges)[0]
    frac = background_bin_fraction(edges[:-1] * DT, edges[1:] * DT, len(pc) / T)
    exp = frac * len(ec)
    ok = exp > 5
    chi = np.sum((obs[ok] - exp[ok]) ** 2 / exp[ok])
    assert stats.chi2.sf(chi, ok.sum()) > 0.01


def test_independent_streams_poisson_compatible():
    pvals = []
    for seed in range(20):
        T, r_q, r_s = 5_000.0, 0.5, 15.0
        n_cyc, ec, pc = _independent_streams(100 + seed, r_q, r_s, T)
        d = nearest_delay_cycles(np.zeros(len(ec)), ec, np.zeros(len(pc)), pc)
        n = np.count_nonzero(np.abs(d) <= 1)
        mu = accidental_rate(len(ec) / T, 0.0, len(pc) / T, 3 * DT) * T
        pvals.append(2 * min(stats.poisson.cdf(n, mu), stats.poisson.sf(n - 1, mu)))
    assert stats.kstest(np.minimum(pvals, 1), "uniform").pvalue > 0.001 or min(pvals) > 0.01


def test_decompose_reference_counts():
    led = decompose_rates(9460, 222, T_RUN, 45.821e-6, 0.133, r_s=1 / 66.616e-3, coverage_err=0.004)
    assert 1 / led.r_QS_mu / 60 == pytest.approx(74, abs=0.5)
    assert 1 / led.r_Q_mu == pytest.approx(592, abs=1)
    assert led.cosmic_fraction == pytest.approx(0.171, abs=0.001)
    lo, hi = led.errors["cosmic_fraction"]
    assert 0.011 < lo < 0.015 and 0.011 < hi < 0.015
    up = 1 / (led.r_Q_mu - led.errors["r_Q_mu"][0]) - 1 / led.r_Q_mu
    assert up == pytest.approx(48, abs=5)


@given(st.integers(1, 20_000), st.floats(0.0, 1.0), st.floats(0.0, 100.0), st.floats(0.01, 1.0))
def test_ledger_identities(n_q, frac, r_s, cov):
    n_qs = int(frac * n_q)
    led = decompose_rates(n_q, n_qs, T_RUN, 45.821e-6, cov, r_s=r_s)
    assert led.r_QS == pytest.approx(led.r_QS_acc + led.r_QS_mu, rel=1e-12, abs=1e-300)
    assert led.r_Q == pytest.approx(led.r_Q_mu + led.r_Q_other, rel=1e-12, abs=1e-300)


def test_decompose_edge_cases():
    led = decompose_rates(100, 10, 1000.0, 1e-4, 0.5, r_s=0.0)
    assert led.r_QS_acc == 0.0 and led.r_QS_mu == led.r_QS
    with pytest.raises(CoverageError):
        decompose_rates(100, 10, 1000.0, 1e-4, 0.0, r_s=1.0)
    with pytest.raises(NoSignalError):
        decompose_rates(0, 0, 1000.0, 1e-4, 0.5, r_s=1.0)


def _closure_trial(rng, T=2e5, r_q=0.05, f=0.2, cov=0.15, r_s=15.0):
    n_cyc = int(T / DT)
    ec = np.sort(rng.choice(n_cyc, rng.poisson(r_q * T), replace=False))
    cosmic = rng.random(len(ec)) < f
    seen = cosmic & (rng.random(len(ec)) < cov)
    tagged = ec[seen] + rng.integers(-1, 2, seen.sum())
    pc = np.unique(np.r_[rng.integers(0, n_cyc, rng.poisson(r_s * T)), tagged])
    d = nearest_delay_cycles(np.zeros(len(ec)), ec, np.zeros(len(pc)), pc)
    n_qs = np.count_nonzero(np.abs(d) <= 1)
    led = decompose_rates(len(ec), n_qs, T, 3 * DT, cov, r_s=len(pc) / T)
    lo, hi = led.errors["cosmic_fraction"]
    return (led.cosmic_fraction - f) / (hi if led.cosmic_fraction < f else lo)


def test_decompose_closure_on_synthetic_run():
    rng = np.random.default_rng(7)
    pulls = np.array([_closure_trial(rng) for _ in range(20)])
    assert np.mean(np.abs(pulls) < 2) >= 0.8
    assert abs(pulls.mean()) < 3 / np.sqrt(len(pulls))


def test_snr_scan():
    rng = np.random.default_rng(8)
    T, r_q, r_s = 266.5 * 3600, 1 / 101.43, 15.0
    n_q = 9460
    sig = rng.choice([-2, -1, 0, 1, 2], 216, p=[0.02, 0.26, 0.49, 0.20, 0.03])
    bg = rng.exponential(1 / (2 * r_s), n_q - 216) / DT * rng.choice([-1, 1], n_q - 216)
    d = np.round(np.r_[sig, bg])
    table, best = snr_vs_window(d, n_q / T, r_s, T, DT, windows=(1, 3, 5, 7, 9, 11))
    assert best == 3
    # past the signal spread N_QS grows linearly with the window and SNR falls,
    # until accidentals outnumber the signal (near 100 cycles here)
    wide, _ = snr_vs_window(d, n_q / T, r_s, T, DT, windows=(3, 11, 21, 41, 81))
    assert np.all(np.diff(wide[:4, 3]) < 0)
    inc = np.diff(wide[2:, 1])  # bg counts over 20 then 40 extra cycles
    assert abs(inc[1] - 2 * inc[0]) < 3 * np.sqrt(inc[1] + 4 * inc[0])
    with pytest.raises(ValueError):
        snr_vs_window(d, n_q / T, r_s, T, DT, windows=(2,))


def test_snr_pure_background():
    rng = np.random.default_rng(9)
    T, r_s, n_q = 1e5, 15.0, 5000
    d = np.round(rng.exponential(1 / (2 * r_s), n_q) / DT * rng.choice([-1, 1], n_q))
    table, best = snr_vs_window(d, n_q / T, r_s, T, DT)
    n_acc = table[:, 2]
    assert np.all(np.abs(table[:, 1] - n_acc) < 4 * np.sqrt(n_acc) + 1)


@pytest.fixture(scope="module")
def detector_xs():
    cfg = SamplerConfig(200.0, 400_000, 17, center=(0.0, 0.0, -60.0))
    table = run_transport(throw_batch(cfg, FluxModel()), default_scene(with_chip=False))
    windows = {lab: (v[4] / v[2], v[5] / v[2]) for lab, v in DETECTORS.items()}
    return cross_sections(table, windows)


def _model_rates(xs, eps, phi):
    s = xs.exclusive_array()
    masks = np.arange(len(s))
    size = np.array([bin(m).count("1") for m in masks])
    r_d, r_ds = {}, {}
    for k, lab in enumerate(xs.labels):
        has = (masks >> k & 1).astype(bool)
        r_d[lab] = eps * phi * s[has].sum()
        r_ds[lab] = eps * phi * np.sum((1 - (1 - eps) ** (size[has] - 1)) * s[has])
    return r_d, r_ds


def test_flux_efficiency_exact_inputs(detector_xs):
    r_d, r_ds = _model_rates(detector_xs, 0.96, 0.0133)
    fe = estimate_flux_and_efficiency(r_d, r_ds, detector_xs)
    assert fe.eps == pytest.approx(0.96, abs=1e-6)
    assert fe.Phi == pytest.approx(0.0133, rel=1e-6)
    r_d, r_ds = _model_rates(detector_xs, 1.0, 0.0133)
    assert estimate_flux_and_efficiency(r_d, r_ds, detector_xs).eps == pytest.approx(1.0, abs=0.01)


def _mc_rates(xs, eps, phi, T, rng):
    """Muons per exclusive combination, each detector firing with probability eps."""
    s = xs.exclusive_array()
    n_lab = xs.n_labels
    n_d = np.zeros(n_lab)
    n_ds = np.zeros(n_lab)
    for m in range(1, len(s)):
        n = rng.poisson(s[m] * phi * T)
        if n == 0:
            continue
        members = [k for k in range(n_lab) if m >> k & 1]
        fired = rng.random((n, len(members))) < eps
        tot = fired.sum(axis=1)
        for j, k in enumerate(members):
            n_d[k] += fired[:, j].sum()
            n_ds[k] += np.count_nonzero(fired[:, j] & (tot >= 2))
    return ({lab: n_d[k] / T for k, lab in enumerate(xs.labels)},
            {lab: n_ds[k] / T for k, lab in enumerate(xs.labels)})


def test_flux_efficiency_closure_mc(detector_xs):
    rng = np.random.default_rng(10)
    r_d, r_ds = _mc_rates(detector_xs, 0.96, 0.0133, 20 * 3600, rng)
    fe = estimate_flux_and_efficiency(r_d, r_ds, detector_xs)
    assert abs(fe.Phi - 0.0133) < 2 * fe.Phi_err
    assert abs(fe.eps - 0.96) < 2 * max(fe.eps_err, 1e-3)
    assert set(fe.per_detector_Phi) == set(detector_xs.labels)


def test_flux_efficiency_unbiased_at_unit_efficiency(detector_xs):
    rng = np.random.default_rng(11)
    est = [estimate_flux_and_efficiency(*_mc_rates(detector_xs, 1.0, 0.0133, 20 * 3600, rng), detector_xs).eps
           for _ in range(5)]
    assert abs(np.mean(est) - 1.0) < 0.01


def test_flux_efficiency_errors(detector_xs):
    zero = {lab: 0.0 for lab in detector_xs.labels}
    with pytest.raises(NoSignalError):
        estimate_flux_and_efficiency(zero, zero, detector_xs)
    with pytest.raises(RateError):
        estimate_flux_and_efficiency({"A": 1.0}, {"A": 0.1}, detector_xs)
    far = detector_xs.marginalize(["A", "B"])
    far.exclusive_counts[3] = 0
    with pytest.raises(CoverageError):
        estimate_flux_and_efficiency({"A": 1.0, "B": 1.0}, {"A": 0.1, "B": 0.1}, far)
