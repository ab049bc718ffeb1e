"""Matched-filter detection of correlated relaxation bursts and per-qubit dynamics.

Per cycle we count qubits whose readout shows a decay in a conditioned cycle,
correlate the counts with a zero-sum one-sided exponential template, and keep
strict local maxima above threshold that are far enough apart.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.optimize import curve_fit
from scipy.signal import oaconvolve

UNDEFINED = np.nan  # marker for p with no preparations
SATURATED = np.inf


@dataclass(frozen=True)
class FilterTemplate:
    values: np.ndarray
    flat_half: int
    decay_tau: float
    cycle_duration: float

    @property
    def length(self) -> int:
        return len(self.values)


def make_template(cycle_duration: float = 15.274e-6, length: int = 1648, decay_tau: float = 5e-3,
                  flat_half: int | None = None) -> FilterTemplate:
    """Zero for the first half, exponential decay for the second, then shifted to zero sum."""
    flat = length // 2 if flat_half is None else flat_half
    h = np.zeros(length)
    m = np.arange(length - flat)
    h[flat:] = np.exp(-m * cycle_duration / decay_tau)
    h -= h.mean()
    return FilterTemplate(h, flat, decay_tau, cycle_duration)


@numba.njit(cache=True)
def _conditioned_counts(bits):
    n, q = bits.shape
    out = np.zeros(n, np.int32)
    for i in range(1, n):
        c = 0
        for j in range(q):
            c += bits[i, j] & bits[i - 1, j]
        out[i] = c
    return out


def relaxation_series(bits: np.ndarray) -> np.ndarray:
    """counts[c] = qubits read ground at c whose previous readout was also ground."""
    return _conditioned_counts(np.ascontiguousarray(bits, dtype=np.uint8))


def cross_correlate(counts: np.ndarray, template: FilterTemplate, pad: str = "mean") -> np.ndarray:
    """y[n] = sum_m h[m] x[n - flat + m]; the peak sits where the decay starts.

    Outside the series the counts are replaced by the series mean so the
    zero-sum template gives no edge response.
    """
    x = np.asarray(counts, dtype=float)
    h = template.values
    L, f = len(h), template.flat_half
    fill = x.mean() if (pad == "mean" and len(x)) else 0.0
    xp = np.concatenate([np.full(f, fill), x, np.full(L - f, fill)])
    full = oaconvolve(xp, h[::-1], mode="valid")
    return full[: len(x)]


@dataclass
class Event:
    entry: int
    onset_cycle: int
    time_ns: int
    peak: float


@dataclass
class EventCatalog:
    events: list = field(default_factory=list)
    candidate_thresh: float = 50.0
    accept_thresh: float = 105.0
    min_sep_cycles: int = 819
    candidates: list = field(default_factory=list)  # (entry, cycle, peak) above candidate_thresh
    status: str = "ok"

    def __len__(self):
        return len(self.events)

    def extend(self, other: "EventCatalog"):
        self.events.extend(other.events)
        self.candidates.extend(other.candidates)

    def sort(self):
        self.events.sort(key=lambda e: (e.time_ns, e.entry))
        self.candidates.sort()


def _strict_maxima(y: np.ndarray, thresh: float) -> np.ndarray:
    i = np.nonzero((y[1:-1] > y[:-2]) & (y[1:-1] > y[2:]) & (y[1:-1] > thresh))[0] + 1
    return i


def _separate(idx: np.ndarray, heights: np.ndarray, distance: int) -> np.ndarray:
    """Keep the tallest peaks so that kept peaks are at least ``distance`` apart."""
    keep = np.ones(len(idx), bool)
    for k in np.argsort(-heights, kind="stable"):
        if not keep[k]:
            continue
        lo = np.searchsorted(idx, idx[k] - distance + 1)
        hi = np.searchsorted(idx, idx[k] + distance)
        keep[lo:hi] = False
        keep[k] = True
    return idx[keep]


def detect_events(counts: np.ndarray, template: FilterTemplate, candidate_thresh: float = 50.0,
                  accept_thresh: float = 105.0, min_sep: float = 12.5e-3, entry: int = 0,
                  start_ns: int = 0) -> EventCatalog:
    dist = int(np.floor(min_sep / template.cycle_duration)) + 1  # strictly more than min_sep
    cat = EventCatalog(candidate_thresh=candidate_thresh, accept_thresh=accept_thresh, min_sep_cycles=dist)
    if len(counts) < template.length:
        warnings.warn("series shorter than the filter template; no events")
        cat.status = "short"
        return cat
    y = cross_correlate(counts, template)
    idx = _strict_maxima(y, candidate_thresh)
    idx = _separate(idx, y[idx], dist)
    dt_ns = template.cycle_duration * 1e9
    for i in idx:
        cat.candidates.append((entry, int(i), float(y[i])))
        if y[i] >= accept_thresh:
            cat.events.append(Event(entry, int(i), int(round(start_ns + (i + 0.5) * dt_ns)), float(y[i])))
    return cat


# --- dynamics -------------------------------------------------------------


def decay_probability(bits: np.ndarray, window: tuple, qubit: int):
    """(p, n_prep, n_decay) over cycles [c0, c1); p is NaN when nothing was prepared."""
    c0, c1 = window
    c0 = max(c0, 1)
    if c1 <= c0:
        return UNDEFINED, 0, 0
    cur = bits[c0:c1, qubit]
    prev = bits[c0 - 1 : c1 - 1, qubit]
    n_prep = int(np.count_nonzero(prev == 1))
    n_decay = int(np.count_nonzero((prev == 1) & (cur == 1)))
    if n_prep == 0:
        return UNDEFINED, 0, 0
    return n_decay / n_prep, n_prep, n_decay


def delta_gamma(p_t, p_pre, delta_eff: float = 3e-6):
    """Excess decay rate from two decay probabilities of the same qubit; A cancels."""
    p_t = np.asarray(p_t, dtype=float)
    p_pre = np.asarray(p_pre, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log((1.0 - p_pre) / (1.0 - p_t)) / delta_eff
    out = np.where(p_t >= 1.0, SATURATED, out)
    return out if out.ndim else float(out)


def _binned_model(t0, d0, tau, w):
    return d0 * (tau / w) * (1.0 - np.exp(-w / tau)) * np.exp(-t0 / tau)


def fit_recovery(dgamma: np.ndarray, bin_duration: float, min_bins: int = 5):
    """Least-squares exponential fit of a binned excess-rate series.

    Bin k averages the rate over [k w, (k+1) w).  Returns (tau, dgamma_init,
    rms residual) or None when fewer than ``min_bins`` bins are positive.
    """
    y = np.asarray(dgamma, dtype=float)
    t0 = np.arange(len(y)) * bin_duration
    ok = np.isfinite(y)
    if np.count_nonzero(ok & (y > 0)) < min_bins:
        return None
    t0, y = t0[ok], y[ok]
    pos = y > 0
    # start from a log-linear fit of the positive bins
    sl, ic = np.polyfit(t0[pos], np.log(y[pos]), 1)
    tau_lo, tau_hi = bin_duration / 20, 1.0
    tau0 = -1.0 / sl if sl < 0 else 10 * bin_duration * len(y)
    tau0 = min(max(tau0, 1.01 * tau_lo), 0.99 * tau_hi)  # flat or noisy series give wild starts
    try:
        popt, _ = curve_fit(lambda t, d0, tau: _binned_model(t, d0, tau, bin_duration), t0, y,
                            p0=(max(y[0], np.exp(ic)), tau0), bounds=([0, tau_lo], [np.inf, tau_hi]),
                            maxfev=5000)
    except RuntimeError:
        return None
    res = y - _binned_model(t0, popt[0], popt[1], bin_duration)
    return float(popt[1]), float(popt[0]), float(np.sqrt(np.mean(res**2)))


@dataclass
class QubitDynamics:
    p_pre: float
    p_t: np.ndarray
    dgamma: np.ndarray
    dgamma_init: float
    tau: float  # NaN when not fitted
    participates: bool


@dataclass
class EventDynamics:
    event: Event
    qubits: list

    @property
    def multiplicity(self) -> int:
        return sum(q.participates for q in self.qubits)


def event_dynamics(bits: np.ndarray, event: Event, bin_cycles: int = 40, pre_cycles: int = 1880,
                   pre_gap: int = 0, post_cycles: int = 1960, threshold: float = 0.2e6,
                   delta_eff: float = 3e-6, cycle_duration: float = 15.274e-6, fit: bool = True):
    """Per-qubit dynamics of one event, or None if the pre-trigger window leaves the entry."""
    c = event.onset_cycle
    pre0 = c - pre_gap - pre_cycles
    if pre0 < 1:
        return None
    n_bins = min(post_cycles, bits.shape[0] - c) // bin_cycles
    out = []
    for j in range(bits.shape[1]):
        p_pre, _, _ = decay_probability(bits, (pre0, c - pre_gap), j)
        p_t = np.array([decay_probability(bits, (c + k * bin_cycles, c + (k + 1) * bin_cycles), j)[0]
                        for k in range(n_bins)])
        dg = delta_gamma(p_t, p_pre, delta_eff) if n_bins else np.zeros(0)
        dg = np.atleast_1d(dg)
        d0 = float(dg[0]) if n_bins else np.nan
        part = bool(np.isfinite(d0) and d0 >= threshold) or d0 == SATURATED
        tau = np.nan
        if fit and part:
            r = fit_recovery(np.where(np.isinf(dg), np.nan, dg), bin_cycles * cycle_duration)
            if r is not None:
                tau = r[0]
        out.append(QubitDynamics(float(p_pre), p_t, dg, d0, tau, part))
    return EventDynamics(event, out)


def participation_histogram(multiplicity: Sequence[int], tagged: Sequence[bool], coverage: float,
                            n_qubits: int = 10):
    """Counts per number of participating qubits, split into cosmic and other.

    The cosmic stack scales the coincidence-tagged counts by 1/coverage.
    """
    m = np.asarray(multiplicity, dtype=int)
    tag = np.asarray(tagged, dtype=bool)
    total = np.bincount(m, minlength=n_qubits + 1)[: n_qubits + 1].astype(float)
    tagged_counts = np.bincount(m[tag], minlength=n_qubits + 1)[: n_qubits + 1].astype(float)
    cosmic = tagged_counts / coverage if coverage > 0 else np.zeros_like(total)
    return total, cosmic, total - cosmic
