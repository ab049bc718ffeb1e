"""Qubit-detector coincidences, accidental background and rate decomposition.

Event and pulse times are whole cycles inside an entry.  A coincidence is a
pulse within (window - 1)/2 cycles of an event onset.  The accidental rate
and the inter-arrival background follow from treating the pulse stream as
Poisson at rate r_S.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import chi2

from .geometry import CoverageError, CrossSectionSet

NO_PULSE = np.inf


class RateError(ValueError):
    pass


class NoSignalError(RateError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    cycles: int = 3
    cycle_duration: float = 15.274e-6

    def __post_init__(self):
        if self.cycles < 1 or self.cycles % 2 == 0:
            raise ValueError("coincidence window must be an odd number of cycles")

    @property
    def seconds(self) -> float:
        return self.cycles * self.cycle_duration

    @property
    def half(self) -> int:
        return self.cycles // 2


@dataclass
class CyclePulses:
    """Pulses already mapped to (entry, cycle)."""

    labels: tuple
    entry: np.ndarray
    cycle: np.ndarray
    detector: np.ndarray

    def __len__(self):
        return len(self.cycle)

    def only(self, label) -> "CyclePulses":
        m = self.detector == self.labels.index(label)
        return CyclePulses(self.labels, self.entry[m], self.cycle[m], self.detector[m])


def rate_from_counts(n, n_windows, window):
    """-ln(1 - n/N)/window: rate of a Poisson process seen as 'at least one per window'."""
    n = np.asarray(n, dtype=float)
    if np.any(n < 0) or np.any(n > n_windows):
        raise RateError("count outside [0, N]")
    if np.any(n == n_windows):
        raise RateError("every window occupied; rate saturated")
    out = -np.log1p(-n / n_windows) / window
    return out if out.ndim else float(out)


def garwood(n, cl: float = 0.6827):
    """Exact Poisson confidence interval on a count."""
    a = 1.0 - cl
    lo = 0.0 if n == 0 else 0.5 * chi2.ppf(a / 2, 2 * n)
    hi = 0.5 * chi2.ppf(1 - a / 2, 2 * n + 2)
    return float(lo), float(hi)


# --- inter-arrival delays -------------------------------------------------


@dataclass
class InterArrivalSet:
    delays: np.ndarray  # signed cycles (pulse - onset); inf when the entry has no pulse
    per_detector: dict = field(default_factory=dict)
    cycle_duration: float = 15.274e-6

    @property
    def seconds(self) -> np.ndarray:
        return self.delays * self.cycle_duration

    def coincident(self, window: WindowConfig) -> np.ndarray:
        return np.abs(self.delays) <= window.half


def _keys(entry, cycle, stride):
    return np.asarray(entry, np.int64) * stride + np.asarray(cycle, np.int64)


def nearest_delay_cycles(ev_entry, ev_cycle, p_entry, p_cycle) -> np.ndarray:
    """Signed cycle offset to the nearest pulse in the same entry; ties go to the earlier pulse."""
    ev_entry = np.asarray(ev_entry, np.int64)
    ev_cycle = np.asarray(ev_cycle, np.int64)
    p_entry = np.asarray(p_entry, np.int64)
    p_cycle = np.asarray(p_cycle, np.int64)
    if len(ev_cycle) == 0 or len(p_cycle) == 0:
        return np.full(len(ev_cycle), NO_PULSE)
    stride = int(max(ev_cycle.max(), p_cycle.max())) + 1
    lo = int(min(ev_cycle.min(), p_cycle.min()))
    if lo < 0:
        raise ValueError("cycle indices must be nonnegative")
    pk, first = np.unique(_keys(p_entry, p_cycle, stride), return_index=True)
    p_e = p_entry[first]
    ek = _keys(ev_entry, ev_cycle, stride)
    i = np.searchsorted(pk, ek)  # first pulse at or after the event
    after = np.full(len(ek), np.inf)
    before = np.full(len(ek), np.inf)
    ok = i < len(pk)
    same = ok.copy()
    same[ok] = p_e[i[ok]] == ev_entry[ok]
    after[same] = (pk[i[same]] - ek[same]).astype(float)
    ok = i > 0
    same = ok.copy()
    same[ok] = p_e[i[ok] - 1] == ev_entry[ok]
    before[same] = (ek[same] - pk[i[same] - 1]).astype(float)
    out = np.where(after < before, after, -before)
    return np.where(np.isinf(after) & np.isinf(before), NO_PULSE, out)


def nearest_delays(events, pulses: CyclePulses, cycle_duration: float = 15.274e-6,
                   per_detector: bool = False) -> InterArrivalSet:
    ent = np.array([e.entry for e in events], np.int64)
    cyc = np.array([e.onset_cycle for e in events], np.int64)
    d = nearest_delay_cycles(ent, cyc, pulses.entry, pulses.cycle)
    per = {}
    if per_detector:
        for lab in pulses.labels:
            p = pulses.only(lab)
            per[lab] = nearest_delay_cycles(ent, cyc, p.entry, p.cycle)
    return InterArrivalSet(d, per, cycle_duration)


# --- background model -----------------------------------------------------


def accidental_rate(r_q: float, r_qs: float, r_s: float, window: float) -> float:
    if r_qs > r_q:
        raise RateError("coincidence rate exceeds event rate")
    return (r_q - r_qs) * np.expm1(r_s * window)


def _two_sided_cdf(t, r_s):
    t = np.asarray(t, dtype=float)
    return np.where(t < 0, 0.5 * np.exp(2 * r_s * np.minimum(t, 0)), 1.0 - 0.5 * np.exp(-2 * r_s * np.maximum(t, 0)))


def background_bin_fraction(lo, hi, r_s: float):
    """Probability that the nearest pulse of a Poisson stream at r_s lies in [lo, hi) seconds."""
    if r_s == 0:
        return np.zeros(np.shape(lo))
    return _two_sided_cdf(hi, r_s) - _two_sided_cdf(lo, r_s)


def background_histogram(r_q: float, r_qs_mu: float, r_s: float, width: float, centers, duration: float):
    """Expected background counts in bins of ``width`` seconds centered at ``centers``.

    For a bin clear of the window this equals
    (r_Q - r_QS^mu) e^{-2 r_S |t|} sinh(r_S width) T.
    """
    c = np.asarray(centers, dtype=float)
    return (r_q - r_qs_mu) * duration * background_bin_fraction(c - width / 2, c + width / 2, r_s)


# --- ledger ---------------------------------------------------------------


@dataclass
class RateLedger:
    N_Q: int
    N_QS: int
    N_S: float
    T: float
    window: float
    r_Q: float
    r_S: float
    r_QS: float
    r_QS_acc: float
    r_QS_mu: float
    C_QS: float
    r_Q_mu: float
    r_Q_other: float
    cosmic_fraction: float
    Phi: float = float("nan")
    errors: dict = field(default_factory=dict)  # name -> (minus, plus)
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("N_Q", "N_QS", "N_S", "T", "window", "r_Q", "r_S", "r_QS",
                                          "r_QS_acc", "r_QS_mu", "C_QS", "r_Q_mu", "r_Q_other",
                                          "cosmic_fraction", "Phi")}
        for k, (m, p) in self.errors.items():
            d[f"{k}_err_minus"] = m
            d[f"{k}_err_plus"] = p
        d.update(self.extras)
        return d


def decompose_rates(n_q: int, n_qs: int, duration: float, window: float, coverage: float,
                    r_s: float | None = None, n_s: float | None = None, cycle: float | None = None,
                    coverage_err: float = 0.0, flux: float = float("nan"), cl: float = 0.6827) -> RateLedger:
    """Fill the ledger: r_QS^mu = r_QS - r_acc, r_Q^mu = r_QS^mu / C, r_Q^other = r_Q - r_Q^mu.

    With ``cycle`` given, r_Q and r_S use the at-least-one-per-cycle form over
    duration/cycle windows; otherwise plain counts over time.
    """
    if coverage <= 0:
        raise CoverageError("coverage is zero; decomposition undefined")
    if r_s is None and n_s is None:
        raise RateError("need r_s or n_s")
    if n_q <= 0:
        raise NoSignalError("no qubit events; decomposition undefined")

    def rates(nq, nqs, ns, c):
        if cycle is not None:
            nw = duration / cycle
            rq = rate_from_counts(nq, nw, cycle)
            rs = r_s if ns is None else rate_from_counts(ns, nw, cycle)
        else:
            rq = nq / duration
            rs = r_s if ns is None else ns / duration
        rqs = nqs / duration
        acc = accidental_rate(rq, rqs, rs, window)
        mu = rqs - acc
        qmu = mu / c
        return dict(r_Q=rq, r_S=rs, r_QS=rqs, r_QS_acc=acc, r_QS_mu=mu, C_QS=c, r_Q_mu=qmu,
                    r_Q_other=rq - qmu, cosmic_fraction=qmu / rq)

    base = rates(n_q, n_qs, n_s, coverage)
    # one-at-a-time propagation of count intervals and the coverage error
    shifts = {"N_Q": [rates(max(x, n_qs), n_qs, n_s, coverage) for x in garwood(n_q, cl)],
              "N_QS": [rates(n_q, min(x, n_q), n_s, coverage) for x in garwood(n_qs, cl)]}
    if n_s is not None:
        shifts["N_S"] = [rates(n_q, n_qs, x, coverage) for x in garwood(n_s, cl)]
    if coverage_err > 0:
        shifts["C"] = [rates(n_q, n_qs, n_s, coverage + s * coverage_err) for s in (-1, 1)]
    errors = {}
    for key, v in base.items():
        lo2 = hi2 = 0.0
        for pair in shifts.values():
            dv = [p[key] - v for p in pair]
            lo2 += min(min(dv), 0.0) ** 2
            hi2 += max(max(dv), 0.0) ** 2
        errors[key] = (float(np.sqrt(lo2)), float(np.sqrt(hi2)))
    return RateLedger(int(n_q), int(n_qs), float(n_s) if n_s is not None else float(base["r_S"] * duration),
                      duration, window, Phi=flux, errors=errors, **{k: float(v) for k, v in base.items()})


# --- window scan ----------------------------------------------------------


def snr_vs_window(delays: np.ndarray, r_q: float, r_s: float, duration: float, cycle_duration: float,
                  windows: Sequence[int] = (1, 3, 5, 7, 9, 11)):
    """Rows (window cycles, N_QS, N_acc, SNR) and the window with the largest SNR."""
    d = np.abs(np.asarray(delays, dtype=float))
    rows = []
    for w in windows:
        if w < 1 or w % 2 == 0:
            raise ValueError("windows must be odd cycle counts")
        n_qs = int(np.count_nonzero(d <= w // 2))
        n_acc = (r_q - n_qs / duration) * np.expm1(r_s * w * cycle_duration) * duration
        rows.append((w, n_qs, n_acc, n_qs / np.sqrt(n_acc) if n_acc > 0 else np.nan))
    table = np.array(rows, dtype=float)
    best = int(table[np.nanargmax(table[:, 3]), 0]) if np.any(np.isfinite(table[:, 3])) else None
    return table, best


# --- detector efficiency and flux ----------------------------------------


@dataclass
class FluxEfficiency:
    Phi: float
    Phi_err: float
    eps: float
    eps_err: float
    per_detector_Phi: dict
    per_detector_eps: dict
    observed_coverage: dict


def _coverage_model(xs: CrossSectionSet, label: str, eps: float) -> tuple[float, float]:
    """(sum over alpha containing d of (1 - (1-eps)^{|alpha|-1}) sigma*, sigma_d) for a shared eps."""
    s = xs.exclusive_array()
    k = xs.labels.index(label)
    masks = np.arange(len(s))
    has = (masks >> k & 1).astype(bool)
    size = np.array([bin(m).count("1") for m in masks])
    w = 1.0 - (1.0 - eps) ** np.maximum(size - 1, 0)
    return float(np.sum(w[has] * s[has])), float(np.sum(s[has]))


def estimate_flux_and_efficiency(r_d: Mapping[str, float], r_ds: Mapping[str, float],
                                 xs: CrossSectionSet) -> FluxEfficiency:
    """Shared efficiency from the observed coverages r_dS/r_d, then Phi per detector.

    The quoted uncertainties are the sample standard deviations across detectors.
    """
    labels = [lab for lab in xs.labels if lab in r_d and lab in r_ds]
    if len(labels) < 2:
        raise RateError("need at least two detectors")
    if all(r_d[lab] == 0 for lab in labels):
        raise NoSignalError("no detector counts")
    c_obs = {}
    for lab in labels:
        full, sig = _coverage_model(xs, lab, 1.0)
        if sig <= 0 or full <= 0:
            raise CoverageError(f"detector {lab} has no coincidence coverage")
        c_obs[lab] = r_ds[lab] / r_d[lab] if r_d[lab] > 0 else 0.0

    def resid(eps, labs):
        out = 0.0
        for lab in labs:
            w, sig = _coverage_model(xs, lab, eps)
            out += (c_obs[lab] - w / sig) ** 2
        return out

    def solve(labs):
        r = minimize_scalar(resid, bounds=(1e-6, 1.0), args=(labs,), method="bounded",
                            options={"xatol": 1e-10})
        return float(r.x)

    eps = solve(labels)
    per_eps = {lab: solve([lab]) for lab in labels}
    per_phi = {}
    for lab in labels:
        w, _ = _coverage_model(xs, lab, eps)
        per_phi[lab] = r_ds[lab] / (eps * w)
    phis = np.array(list(per_phi.values()))
    if not np.any(phis > 0):
        raise NoSignalError("no coincidences")
    return FluxEfficiency(float(phis.mean()), float(phis.std(ddof=1)), eps,
                          float(np.std(list(per_eps.values()), ddof=1)), per_phi, per_eps, c_obs)

