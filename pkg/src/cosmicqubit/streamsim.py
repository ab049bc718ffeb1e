"""Synthetic experiments: burst truth, qubit single-shot streams and detector pulses.

Time runs on the qubit clock in seconds.  Entry e covers
[e*(span + gap), e*(span + gap) + span) with span = cycles_per_entry * cycle.
Nothing happens in the gaps: bursts and muons are drawn on live time only.

Each cycle is prepare (pi pulse), wait the effective delay, read out, then
idle for ``wait_time``.  Readout bit 1 means ground, i.e. the qubit decayed.
A cycle whose previous readout was excited starts from the excited state and
is not an informative preparation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.stats import truncnorm

from . import _rng
from .geometry import DepositionTable

NS_GRID = 4  # ADC timestamp resolution, ns


@dataclass(frozen=True)
class TimebaseConfig:
    cycle_duration: float = 15.274e-6
    cycles_per_entry: int = 1_000_000
    inter_entry_gap: float = 12.0
    ref_pulse_period: int = 100
    clock_skew: float = 0.0  # fractional rate offset of the detector clock
    # instant, in cycles after the detector-clock cycle boundary, at which record c
    # samples the decay rate; above 1 the record lags the detector clock
    measure_phase: float = 1.4

    def __post_init__(self):
        if self.cycle_duration <= 0:
            raise ValueError("cycle_duration must be positive")
        if self.cycles_per_entry % self.ref_pulse_period:
            raise ValueError("cycles_per_entry must be a multiple of ref_pulse_period")
        if not 0 <= self.measure_phase < 2:
            raise ValueError("measure_phase must be in [0, 2)")

    @property
    def entry_span(self) -> float:
        return self.cycles_per_entry * self.cycle_duration

    @property
    def entry_stride(self) -> float:
        return self.entry_span + self.inter_entry_gap

    def entry_start(self, entry) -> np.ndarray | float:
        return np.asarray(entry) * self.entry_stride

    def entry_start_ns(self, entry: int) -> int:
        return int(round(entry * self.entry_stride * 1e9))

    def live_to_wall(self, u):
        u = np.asarray(u, dtype=float)
        e = np.floor(u / self.entry_span).astype(np.int64)
        return e * self.entry_stride + (u - e * self.entry_span), e

    def locate(self, t):
        """(entry, cycle) of wall times; cycle is -1 inside gaps."""
        t = np.asarray(t, dtype=float)
        e = np.floor(t / self.entry_stride).astype(np.int64)
        c = np.floor((t - e * self.entry_stride) / self.cycle_duration).astype(np.int64)
        c = np.where(c < self.cycles_per_entry, c, -1)
        return e, c


@dataclass(frozen=True)
class QubitParams:
    label: str
    baseline_gamma: float  # 1/s
    recovery_tau: float  # s
    effective_delay: float = 3e-6
    fidelity_a: float = 1.0
    wait_time: float = 10.2e-6

    def __post_init__(self):
        if self.baseline_gamma <= 0 or self.recovery_tau <= 0:
            raise ValueError(f"{self.label}: rates and time constants must be positive")
        if not 0 < self.fidelity_a <= 1:
            raise ValueError(f"{self.label}: fidelity must be in (0, 1]")

    def decay_probability(self, gamma):
        return 1.0 - self.fidelity_a * np.exp(-np.asarray(gamma) * self.effective_delay)


@dataclass(frozen=True)
class AmplitudeLaw:
    """Per-qubit participation probability and a log-uniform initial rate jump."""

    participation: tuple  # probability per qubit
    dgamma_lo: float = 0.05e6  # 1/s
    dgamma_hi: float = 2.0e6

    def draw(self, rng: np.random.Generator, n_events: int) -> np.ndarray:
        part = np.asarray(self.participation, dtype=float)
        on = rng.random((n_events, len(part))) < part
        lg = rng.uniform(np.log(self.dgamma_lo), np.log(self.dgamma_hi), (n_events, len(part)))
        return np.where(on, np.exp(lg), 0.0)


@dataclass
class BurstTruth:
    onset_time: float  # wall seconds
    entry: int
    cycle: int
    source_tag: str  # "cosmic" | "other"
    per_qubit_dgamma: np.ndarray  # 1/s
    linked_muon: int | None = None  # index into the muon stream


@dataclass
class MuonSource:
    """Rows of a deposition table that feed one Poisson muon stream.

    ``require`` / ``forbid`` select rows with / without a deposit in a label.
    The stream rate is Phi * area * (selected rows / thrown).
    """

    table: DepositionTable
    require: str | None = None
    forbid: str | None = None
    rows: np.ndarray = field(init=False)
    energies: np.ndarray = field(init=False)

    def __post_init__(self):
        rows, mat = self.table.dense()
        keep = np.ones(len(rows), bool)
        if self.require is not None:
            keep &= mat[:, self.table.labels.index(self.require)] > 0
        if self.forbid is not None:
            keep &= mat[:, self.table.labels.index(self.forbid)] == 0
        self.rows = rows[keep]
        self.energies = mat[keep]

    def rate(self, flux: float) -> float:
        if self.table.total_thrown == 0:
            return 0.0
        return flux * self.table.tangent_area * len(self.rows) / self.table.total_thrown


@dataclass
class MuonStream:
    """Time-ordered muon arrivals, each referencing a row of one source."""

    labels: tuple
    time: np.ndarray  # wall seconds
    source: np.ndarray  # int8 index into sources
    row: np.ndarray  # index into the source's selected rows
    sources: list

    def __len__(self):
        return len(self.time)

    def energies(self) -> np.ndarray:
        out = np.zeros((len(self.time), len(self.labels)))
        for k, src in enumerate(self.sources):
            sel = self.source == k
            cols = [src.table.labels.index(lab) for lab in self.labels]
            out[sel] = src.energies[self.row[sel]][:, cols]
        return out

    def muon_index(self) -> np.ndarray:
        out = np.zeros(len(self.time), np.int64)
        for k, src in enumerate(self.sources):
            sel = self.source == k
            out[sel] = src.rows[self.row[sel]]
        return out


def _poisson_live(rng, rate, live):
    n = rng.poisson(rate * live) if rate > 0 else 0
    return np.sort(rng.uniform(0.0, live, n))


def simulate_truth(sources: Sequence[MuonSource], flux: float, r_other: float, n_entries: int,
                   tb: TimebaseConfig, cosmic_law: AmplitudeLaw, other_law: AmplitudeLaw,
                   seed: int, chip_label: str = "Q"):
    """Draw burst truth and the muon stream over ``n_entries`` entries.

    Every muon that deposits in the chip becomes a cosmic burst; the other
    bursts are an independent Poisson process at ``r_other``.
    """
    if flux < 0 or r_other < 0:
        raise ValueError("rates must be nonnegative")
    rng = _rng.stream(seed, "truth")
    live = n_entries * tb.entry_span
    labels = sources[0].table.labels if sources else (chip_label,)
    t_all, s_all, r_all = [], [], []
    for k, src in enumerate(sources):
        u = _poisson_live(rng, src.rate(flux), live)
        t_all.append(u)
        s_all.append(np.full(len(u), k, np.int8))
        r_all.append(rng.integers(0, max(len(src.rows), 1), len(u)))
    if t_all:
        u = np.concatenate(t_all)
        order = np.argsort(u, kind="stable")
        u, src_id, row = u[order], np.concatenate(s_all)[order], np.concatenate(r_all)[order]
    else:
        u, src_id, row = np.zeros(0), np.zeros(0, np.int8), np.zeros(0, np.int64)
    t_mu, _ = tb.live_to_wall(u)
    stream = MuonStream(labels, t_mu, src_id, row, list(sources))

    truth = []
    if len(stream) and chip_label in labels:
        q = labels.index(chip_label)
        chip_hit = np.nonzero(stream.energies()[:, q] > 0)[0]
        dg = cosmic_law.draw(rng, len(chip_hit))
        for j, i in enumerate(chip_hit):
            truth.append(("cosmic", t_mu[i], dg[j], int(i)))
    u_o = _poisson_live(rng, r_other, live)
    t_o, _ = tb.live_to_wall(u_o)
    dg = other_law.draw(rng, len(t_o))
    for j, t in enumerate(t_o):
        truth.append(("other", t, dg[j], None))
    truth.sort(key=lambda x: x[1])
    out = []
    for tag, t, d, link in truth:
        e, c = tb.locate(t)
        out.append(BurstTruth(float(t), int(e), int(c), tag, d, link))
    return out, stream


# --- qubit shots ----------------------------------------------------------


@dataclass
class ShotEntry:
    entry: int
    start_ns: int
    bits: np.ndarray  # uint8 [cycles, qubits], 1 = ground

    @property
    def n_cycles(self) -> int:
        return self.bits.shape[0]

    @property
    def n_qubits(self) -> int:
        return self.bits.shape[1]

    @property
    def conditioned(self) -> np.ndarray:
        """Cycle counts as a preparation only if the previous readout was ground."""
        c = np.zeros_like(self.bits, dtype=bool)
        c[1:] = self.bits[:-1] == 1
        return c


@dataclass
class ShotMatrix:
    entries: list
    qubit_labels: tuple = ()

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)


_U64 = np.uint64
_TWO64 = 18446744073709551616.0


@numba.njit(cache=True, inline="always")
def _next(state):
    # xorshift128+; returns a uniform 64-bit integer
    s1 = state[0]
    s0 = state[1]
    state[0] = s0
    s1 ^= s1 << _U64(23)
    s1 ^= s1 >> _U64(17)
    s1 ^= s0 ^ (s0 >> _U64(26))
    state[1] = s1
    return s0 + s1


@numba.njit(cache=True)
def _threshold(x):
    if x >= 1.0:
        return _U64(0xFFFFFFFFFFFFFFFF)
    if x <= 0.0:
        return _U64(0)
    return _U64(x * _TWO64)


@numba.njit(cache=True)
def _shots_kernel(seed0, seed1, n, gamma0, delay, wait, amp, excess, has_excess, out):
    nq = gamma0.shape[0]
    state = np.empty(2, np.uint64)
    state[0] = seed0
    state[1] = seed1
    p0 = np.empty(nq, np.uint64)
    s0 = np.empty(nq, np.uint64)
    for j in range(nq):
        p = 1.0 - amp[j] * np.exp(-gamma0[j] * delay[j])
        qw = 1.0 - np.exp(-gamma0[j] * wait[j])
        p0[j] = _threshold(p)
        s0[j] = _threshold((1.0 - qw) + qw * p)
    prev = np.ones(nq, dtype=np.uint8)  # idle qubits start in ground
    for i in range(n):
        for j in range(nq):
            if prev[j] == 1:
                thr = p0[j]
            else:
                thr = s0[j]
            if has_excess[j]:
                ex = excess[i, j]
                if ex > 0.0:
                    g = gamma0[j] + ex
                    p = 1.0 - amp[j] * np.exp(-g * delay[j])
                    if prev[j] == 1:
                        thr = _threshold(p)
                    else:
                        qw = 1.0 - np.exp(-g * wait[j])
                        thr = _threshold((1.0 - qw) + qw * p)
            b = np.uint8(1) if _next(state) < thr else np.uint8(0)
            out[i, j] = b
            prev[j] = b


def excess_gamma(truth: Sequence[BurstTruth], qubits: Sequence[QubitParams], tb: TimebaseConfig,
                 entry: int, cutoff: float = 1e-4):
    """Dense excess decay rate [cycles, qubits] for one entry, or None when quiet.

    The rate is sampled at t_c = start + (c + measure_phase) * cycle.
    """
    start = tb.entry_start(entry)
    n = tb.cycles_per_entry
    tau = np.array([q.recovery_tau for q in qubits])
    horizon = tau.max() * np.log(1.0 / cutoff) * 10
    ex = None
    for b in truth:
        if b.onset_time >= start + tb.entry_span or b.onset_time < start - horizon:
            continue
        if ex is None:
            ex = np.zeros((n, len(qubits)), np.float64)
        for j, dg in enumerate(b.per_qubit_dgamma):
            if dg <= 0:
                continue
            # first sample instant at or after onset
            c0 = int(np.ceil((b.onset_time - start) / tb.cycle_duration - tb.measure_phase))
            c0 = max(c0, 0)
            span = tau[j] * np.log(max(dg / (cutoff * qubits[j].baseline_gamma), 1.0 + 1e-12))
            c1 = min(n, c0 + int(span / tb.cycle_duration) + 2)
            if c1 <= c0:
                continue
            tc = start + (np.arange(c0, c1) + tb.measure_phase) * tb.cycle_duration
            ex[c0:c1, j] += dg * np.exp(-(tc - b.onset_time) / tau[j])
    return ex


def render_entry(entry: int, truth: Sequence[BurstTruth], qubits: Sequence[QubitParams],
                 tb: TimebaseConfig, seed: int) -> ShotEntry:
    nq = len(qubits)
    n = tb.cycles_per_entry
    gamma0 = np.array([q.baseline_gamma for q in qubits], float)
    delay = np.array([q.effective_delay for q in qubits], float)
    wait = np.array([q.wait_time for q in qubits], float)
    amp = np.array([q.fidelity_a for q in qubits], float)
    ex = excess_gamma(truth, qubits, tb, entry)
    if ex is None:
        ex = np.zeros((1, nq))
        has = np.zeros(nq, np.bool_)
    else:
        has = ex.max(axis=0) > 0
    out = np.empty((n, nq), np.uint8)
    st = _rng.stream(seed, "shots", entry).integers(1, 2**63, 2, dtype=np.uint64)
    _shots_kernel(st[0], st[1], n, gamma0, delay, wait, amp, ex, has, out)
    return ShotEntry(entry, tb.entry_start_ns(entry), out)


def render_shots(truth, qubits, tb: TimebaseConfig, seed: int, entries: Sequence[int]) -> ShotMatrix:
    by_entry = {}
    for b in truth:
        by_entry.setdefault(b.entry, []).append(b)
    out = []
    for e in entries:
        near = by_entry.get(e - 1, []) + by_entry.get(e, [])
        out.append(render_entry(e, near, qubits, tb, seed))
    return ShotMatrix(out, tuple(q.label for q in qubits))


def stationary_ground_fraction(q: QubitParams, gamma=None) -> float:
    """Long-run fraction of ground readouts for a constant decay rate."""
    g = q.baseline_gamma if gamma is None else gamma
    p = q.decay_probability(g)
    qw = 1.0 - np.exp(-g * q.wait_time)
    s = (1.0 - qw) + qw * p
    return float(s / (1.0 - p + s))


# --- detector pulses ------------------------------------------------------


@dataclass(frozen=True)
class PulseRecord:
    detector: str
    timestamp_ns: int
    amplitude: float


@dataclass
class PulseTable:
    labels: tuple
    detector: np.ndarray  # int8 into labels
    timestamp_ns: np.ndarray  # int64
    amplitude: np.ndarray

    def __len__(self):
        return len(self.timestamp_ns)

    def records(self):
        for d, t, a in zip(self.detector, self.timestamp_ns, self.amplitude):
            yield PulseRecord(self.labels[d], int(t), float(a))

    def select(self, mask) -> "PulseTable":
        return PulseTable(self.labels, self.detector[mask], self.timestamp_ns[mask], self.amplitude[mask])


def to_ns_grid(t_seconds, skew: float = 0.0) -> np.ndarray:
    t = np.asarray(t_seconds, dtype=float) * (1.0 + skew) * 1e9
    return (np.round(t / NS_GRID) * NS_GRID).astype(np.int64)


def smear_energy(energy: np.ndarray, b: float, rng: np.random.Generator, e0: float = 5.0) -> np.ndarray:
    """Gaussian smear with sigma = b sqrt(e0 E), truncated to positive values."""
    energy = np.asarray(energy, dtype=float)
    if b == 0:
        return energy.copy()
    sig = b * np.sqrt(e0 * energy)
    lo = -energy / sig
    return truncnorm.rvs(lo, np.inf, loc=energy, scale=sig, random_state=rng)


def render_pulses(stream: MuonStream, responses: dict, efficiencies: dict, tb: TimebaseConfig,
                  seed: int) -> PulseTable:
    """One pulse per detector deposit, amplitude a*E_s, kept with probability eps.

    ``responses`` maps label to an object with ``a`` and ``b`` attributes.
    """
    rng = _rng.stream(seed, "pulses")
    labels = tuple(lab for lab in stream.labels if lab in responses)
    if not len(stream):
        return PulseTable(labels, np.zeros(0, np.int8), np.zeros(0, np.int64), np.zeros(0))
    en = stream.energies()
    det, ts, amp = [], [], []
    for k, lab in enumerate(labels):
        col = en[:, stream.labels.index(lab)]
        hit = np.nonzero(col > 0)[0]
        resp = responses[lab]
        es = smear_energy(col[hit], resp.b, rng)
        keep = rng.random(len(hit)) < efficiencies.get(lab, 1.0)
        hit, es = hit[keep], es[keep]
        det.append(np.full(len(hit), k, np.int8))
        ts.append(to_ns_grid(stream.time[hit], tb.clock_skew))
        amp.append(resp.a * es)
    det, ts, amp = np.concatenate(det), np.concatenate(ts), np.concatenate(amp)
    order = np.lexsort((det, ts))
    return PulseTable(labels, det[order], ts[order], amp[order])


def emit_reference_pulses(tb: TimebaseConfig, entries: Sequence[int] = (0,)) -> np.ndarray:
    """Detector-clock timestamps (ns) of the reference pulses: after the first
    ``ref_pulse_period`` cycles of an entry and every period thereafter."""
    k = np.arange(1, tb.cycles_per_entry // tb.ref_pulse_period + 1)
    out = [tb.entry_start(e) + k * tb.ref_pulse_period * tb.cycle_duration for e in entries]
    t = np.concatenate(out) if out else np.zeros(0)
    return to_ns_grid(t, tb.clock_skew)
